use super::Model;
use crate::autodiff::{ParameterStore, Real, Tensor};
use crate::data::Utterance;
use crate::{Error, ExecPolicy, Result};

/// Held-out scores. Durations and attention come from inference (zero
/// latent, predicted length); the spectrogram score is the final block's
/// Soft-DTW at the target length.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub mean_dur_err: f64,
    /// Pearson correlation of predicted vs true per-token durations.
    pub correlation: f64,
    pub spec_per_frame: f64,
    /// Mean fraction of tokens that are the argmax of some frame.
    pub coverage: f64,
    /// Fraction of utterances whose frame-wise argmax never moves backwards.
    pub monotonic_frac: f64,
    pub utterances: usize,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "mean_dur_err,corr,spec_per_frame,coverage,monotonic_frac";

    pub fn csv_line(&self) -> String {
        format!(
            "{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.mean_dur_err,
            self.correlation,
            self.spec_per_frame,
            self.coverage,
            self.monotonic_frac
        )
    }
}

struct PerUtterance {
    dur_err: f64,
    pairs: Vec<(f64, f64)>,
    spec_per_frame: f64,
    coverage: f64,
    monotone: bool,
}

/// Frame-wise argmax over tokens of a `T×K` attention matrix (first max wins).
pub fn argmax_tokens<T: Real>(w: &Tensor<T>) -> Vec<usize> {
    let k = w.shape()[1];
    w.data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |best, (i, &x)| {
                    if x > best.1 {
                        (i, x)
                    } else {
                        best
                    }
                })
                .0
        })
        .collect()
}

pub fn pearson(pairs: &[(f64, f64)]) -> f64 {
    let n = pairs.len() as f64;
    if pairs.len() < 2 {
        return 0.0;
    }
    let (mx, my) = pairs.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0, a.1 + p.1));
    let (mx, my) = (mx / n, my / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for &(x, y) in pairs {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

fn score<T: Real>(model: &Model, store: &ParameterStore<T>, u: &Utterance) -> Result<PerUtterance> {
    let out = model.infer(store, &u.ids, &[])?;
    let k = u.tokens();
    let t = u.frame_count();
    let pred: Vec<f64> = out.durations.data().iter().map(|x| x.as_f64()).collect();
    let dur_err = (t as f64 - pred.iter().sum::<f64>()).abs() / k as f64;
    let arg = argmax_tokens(&out.attention);
    let mut seen = vec![false; k];
    arg.iter().for_each(|&i| seen[i] = true);
    let coverage = seen.iter().filter(|&&s| s).count() as f64 / k as f64;
    let monotone = arg.windows(2).all(|w| w[0] <= w[1]);
    let loss = model.eval_loss(store, &u.ids, &u.frames.cast::<T>())?;
    Ok(PerUtterance {
        dur_err,
        pairs: pred
            .into_iter()
            .zip(u.durations.iter().map(|&d| d as f64))
            .collect(),
        spec_per_frame: loss.final_spec_per_frame(),
        coverage,
        monotone,
    })
}

pub fn evaluate<T: Real>(
    model: &Model,
    store: &ParameterStore<T>,
    utterances: &[Utterance],
) -> Result<EvalReport> {
    evaluate_with(model, store, utterances, ExecPolicy::best())
}

pub fn evaluate_with<T: Real>(
    model: &Model,
    store: &ParameterStore<T>,
    utterances: &[Utterance],
    exec: ExecPolicy,
) -> Result<EvalReport> {
    if utterances.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let scored = exec.map(utterances, |_, u| score(model, store, u));
    let scored = scored.into_iter().collect::<Result<Vec<_>>>()?;
    let n = scored.len() as f64;
    let pairs: Vec<(f64, f64)> = scored
        .iter()
        .flat_map(|s| s.pairs.iter().copied())
        .collect();
    Ok(EvalReport {
        mean_dur_err: scored.iter().map(|s| s.dur_err).sum::<f64>() / n,
        correlation: pearson(&pairs),
        spec_per_frame: scored.iter().map(|s| s.spec_per_frame).sum::<f64>() / n,
        coverage: scored.iter().map(|s| s.coverage).sum::<f64>() / n,
        monotonic_frac: scored.iter().filter(|s| s.monotone).count() as f64 / n,
        utterances: scored.len(),
    })
}
