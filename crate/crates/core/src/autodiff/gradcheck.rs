//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::store::ParameterStore;
use crate::Result;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Central-difference half step.
    pub step: f64,
    /// Lower bound on the relative-error denominator.
    pub floor: f64,
    /// Check at most this many elements per parameter (sampled by `seed`).
    pub max_elements: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-4,
            floor: 1e-6,
            max_elements: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn max_rel_err(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn failures(&self, tol: f64) -> Vec<&ParamCheck> {
        self.params
            .iter()
            .filter(|p| p.max_rel_err.is_nan() || p.max_rel_err > tol)
            .collect()
    }

    pub fn passed(&self, tol: f64) -> bool {
        self.failures(tol).is_empty()
    }

    /// Plain-text table, one parameter per line.
    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<48} {:>8} {:>12} {:>12}\n",
            "parameter", "checked", "max_rel", "max_abs"
        );
        for p in &self.params {
            s.push_str(&format!(
                "{:<48} {:>8} {:>12.3e} {:>12.3e}\n",
                p.name, p.checked, p.max_rel_err, p.max_abs_err
            ));
        }
        s
    }
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compare backward-pass gradients of the scalar built by `build` against
/// central differences, for every trainable entry of `store`.
pub fn check_gradients<F>(
    store: &ParameterStore<f64>,
    build: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParameterStore<f64>) -> Result<Var>,
{
    check_gradients_ladder(store, build, &[opts.step], opts)
}

/// Like [`check_gradients`], but each element is differenced at every step
/// in `steps` and scored by the closest agreement. Central differences are
/// unreliable when a step straddles a kink (`|·|`) or lands in a region of
/// large third derivative; an adjoint error shows at every step.
pub fn check_gradients_ladder<F>(
    store: &ParameterStore<f64>,
    build: F,
    steps: &[f64],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParameterStore<f64>) -> Result<Var>,
{
    assert!(!steps.is_empty(), "at least one step");
    let names = store.trainable_names();
    if names.is_empty() {
        return Ok(GradCheckReport::default());
    }
    let mut g = Graph::new();
    let root = build(&mut g, store)?;
    let grads = g.backward(root)?;
    let analytic: std::collections::BTreeMap<String, _> =
        g.param_grads(&grads).into_iter().collect();

    let eval = |s: &ParameterStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let r = build(&mut g, s)?;
        Ok(g.scalar(r))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = store.clone();
    let mut report = GradCheckReport::default();
    for name in names {
        let n = store.value(&name).expect("listed").len();
        let idx: Vec<usize> = match opts.max_elements {
            Some(m) if m < n => {
                let mut v = sample(&mut rng, n, m).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        };
        let mut check = ParamCheck {
            name: name.clone(),
            checked: idx.len(),
            max_rel_err: 0.0,
            max_abs_err: 0.0,
        };
        for i in idx {
            let orig = work.value(&name).expect("listed").data()[i];
            let a = analytic.get(&name).map_or(0.0, |t| t.data()[i]);
            let (mut rel, mut abs) = (f64::INFINITY, f64::INFINITY);
            for &h in steps {
                work.value_mut(&name).expect("listed").data_mut()[i] = orig + h;
                let plus = eval(&work)?;
                work.value_mut(&name).expect("listed").data_mut()[i] = orig - h;
                let minus = eval(&work)?;
                let numeric = (plus - minus) / (2.0 * h);
                let r = relative_error(a, numeric, opts.floor);
                if r < rel {
                    rel = r;
                    abs = (a - numeric).abs();
                }
            }
            work.value_mut(&name).expect("listed").data_mut()[i] = orig;
            check.max_rel_err = check.max_rel_err.max(rel);
            check.max_abs_err = check.max_abs_err.max(abs);
        }
        report.params.push(check);
    }
    Ok(report)
}
