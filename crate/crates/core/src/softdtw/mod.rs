//! Banded, differentiable Soft-DTW between a target and a predicted
//! spectrogram.
//!
//! `r[i][j]` (1-based, `r[0][0] = 0`, other borders `+∞`) is the smoothed
//! cost of aligning the first `i` target frames with the first `j`
//! predicted frames:
//!
//! ```text
//! r[i][j] = softmin_γ( r[i-1][j]   + c_vert(i, j) + warp,
//!                      r[i][j-1]   + c_horz(i, j) + warp,
//!                      r[i-1][j-1] + c_diag(i, j) )
//! ```
//!
//! Branch costs are L1 distances between frames; which frames each branch
//! compares is selected by [`CostIndexing`]. Only cells inside a diagonal
//! band around the line from `(1,1)` to `(T_x,T_y)` are evaluated; cells
//! outside are `+∞` and drop out of the soft minimum.

pub mod oracle;

use crate::autodiff::{sign0, Real, Tensor};
use crate::{Error, ExecPolicy, Result};

/// Which frames the three branches compare (0-based frame indices, DP cell `(i, j)`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CostIndexing {
    /// Vertical `x[i-1]` vs `x̄[j]`, horizontal `x[i]` vs `x̄[j-1]`, diagonal
    /// `x[i-1]` vs `x̄[j-1]`. Indices past the last frame clamp to it.
    #[default]
    Paper,
    /// Every branch compares `x[i-1]` with `x̄[j-1]`.
    Symmetric,
}

impl std::str::FromStr for CostIndexing {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(CostIndexing::Paper),
            "symmetric" => Ok(CostIndexing::Symmetric),
            _ => Err(Error::Config(format!(
                "cost_indexing must be `paper` or `symmetric`, got `{s}`"
            ))),
        }
    }
}

impl std::fmt::Display for CostIndexing {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CostIndexing::Paper => "paper",
            CostIndexing::Symmetric => "symmetric",
        })
    }
}

impl CostIndexing {
    /// Frame pairs `(target, prediction)` for the vertical, horizontal and
    /// diagonal branches into DP cell `(i, j)`.
    pub fn branch_frames(self, i: usize, j: usize, tx: usize, ty: usize) -> [(usize, usize); 3] {
        let diag = (i - 1, j - 1);
        match self {
            CostIndexing::Symmetric => [diag, diag, diag],
            CostIndexing::Paper => [(i - 1, j.min(ty - 1)), (i.min(tx - 1), j - 1), diag],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoftDtwConfig {
    pub gamma: f64,
    pub warp: f64,
    pub band_half_width: usize,
    pub cost_indexing: CostIndexing,
    /// Mutation hook for oracle self-tests: adds 1 to the horizontal warp
    /// penalty in the DP only.
    #[doc(hidden)]
    pub corrupt_horizontal_warp: bool,
}

impl Default for SoftDtwConfig {
    fn default() -> Self {
        SoftDtwConfig {
            gamma: 0.05,
            warp: 128.0,
            band_half_width: 30,
            cost_indexing: CostIndexing::Paper,
            corrupt_horizontal_warp: false,
        }
    }
}

impl SoftDtwConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gamma <= 0.0 || !self.gamma.is_finite() {
            return Err(Error::Config(format!(
                "gamma must be > 0, got {}",
                self.gamma
            )));
        }
        if self.warp < 0.0 || !self.warp.is_finite() {
            return Err(Error::Config(format!(
                "warp must be >= 0, got {}",
                self.warp
            )));
        }
        if self.band_half_width < 1 {
            return Err(Error::Config("band_half_width must be >= 1".into()));
        }
        Ok(())
    }

    /// Same settings with a band wide enough to cover any `tx × ty` table.
    pub fn full_band(&self, tx: usize, ty: usize) -> Self {
        SoftDtwConfig {
            band_half_width: tx.max(ty).max(1),
            ..*self
        }
    }
}

/// `−γ·log Σ exp(−aᵢ/γ)`, shifted by the minimum. `+∞` entries are ignored;
/// all-infinite input yields `+∞`.
pub fn soft_min<T: Real>(values: &[T], gamma: T) -> Result<T> {
    if values.is_empty() {
        return Err(Error::Empty("soft_min values"));
    }
    Ok(soft_min_unchecked(values, gamma))
}

fn soft_min_unchecked<T: Real>(values: &[T], gamma: T) -> T {
    let m = values.iter().copied().fold(T::infinity(), T::min);
    if m == T::infinity() {
        return m;
    }
    let s: T = values
        .iter()
        .filter(|v| v.is_finite())
        .map(|&v| (-(v - m) / gamma).exp())
        .sum();
    m - gamma * s.ln()
}

/// Inclusive 1-based column range of each DP row inside the band.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Band {
    pub tx: usize,
    pub ty: usize,
    lo: Vec<usize>,
    hi: Vec<usize>,
}

impl Band {
    /// Cells with `|j − c(i)| ≤ half_width`, where `c` is the line through
    /// `(1,1)` and `(tx,ty)`. Rows are widened where needed so that
    /// consecutive rows stay connected.
    pub fn new(tx: usize, ty: usize, half_width: usize) -> Self {
        let (mut lo, mut hi) = (vec![0; tx + 1], vec![0; tx + 1]);
        let w = half_width as i64;
        for i in 1..=tx {
            if tx == 1 {
                lo[i] = 1;
                hi[i] = ty;
                continue;
            }
            let num = (i as i64 - 1) * (ty as i64 - 1);
            let den = tx as i64 - 1;
            let l = 1
                + (num - w * den).div_euclid(den)
                + i64::from((num - w * den).rem_euclid(den) != 0);
            let h = 1 + (num + w * den).div_euclid(den);
            lo[i] = l.max(1) as usize;
            hi[i] = (h.min(ty as i64)) as usize;
        }
        for i in 1..tx {
            if lo[i + 1] > hi[i] + 1 {
                hi[i] = lo[i + 1] - 1;
            }
        }
        Band { tx, ty, lo, hi }
    }

    pub fn row(&self, i: usize) -> (usize, usize) {
        (self.lo[i], self.hi[i])
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        (1..=self.tx).contains(&i) && j >= self.lo[i] && j <= self.hi[i]
    }

    pub fn cell_count(&self) -> usize {
        (1..=self.tx).map(|i| self.hi[i] + 1 - self.lo[i]).sum()
    }
}

/// Banded storage of the DP values `r[i][j]`.
#[derive(Debug, Clone)]
pub struct BandTable<T> {
    band: Band,
    offset: Vec<usize>,
    cells: Vec<T>,
}

impl<T: Real> BandTable<T> {
    fn new(band: Band, fill: T) -> Self {
        let mut offset = vec![0; band.tx + 2];
        for i in 1..=band.tx {
            offset[i + 1] = offset[i] + band.hi[i] + 1 - band.lo[i];
        }
        let n = offset[band.tx + 1];
        BandTable {
            band,
            offset,
            cells: vec![fill; n],
        }
    }

    pub fn band(&self) -> &Band {
        &self.band
    }

    pub fn tx(&self) -> usize {
        self.band.tx
    }

    pub fn ty(&self) -> usize {
        self.band.ty
    }

    /// `r[i][j]`, including the implicit borders and out-of-band `+∞`.
    pub fn get(&self, i: usize, j: usize) -> T {
        if i == 0 || j == 0 {
            return if i == 0 && j == 0 {
                T::zero()
            } else {
                T::infinity()
            };
        }
        if !self.band.contains(i, j) {
            return T::infinity();
        }
        self.cells[self.offset[i] + j - self.band.lo[i]]
    }

    fn slot(&mut self, i: usize, j: usize) -> &mut T {
        let idx = self.offset[i] + j - self.band.lo[i];
        &mut self.cells[idx]
    }

    pub fn cell_count(&self) -> usize {
        self.cells.len()
    }

    /// The loss `r[T_x][T_y]`.
    pub fn value(&self) -> T {
        self.get(self.band.tx, self.band.ty)
    }
}

/// L1 frame distances for every frame pair the DP can reference.
struct CostTable<T> {
    lo: Vec<usize>,
    offset: Vec<usize>,
    cells: Vec<T>,
}

impl<T: Real> CostTable<T> {
    fn build(x: &Tensor<T>, y: &Tensor<T>, band: &Band, exec: ExecPolicy) -> Self {
        let (tx, ty) = (band.tx, band.ty);
        let f = x.shape()[1];
        // Cost row `a` serves DP rows `a` and `a + 1`; band rows are monotone.
        let mut lo = vec![0; tx];
        let mut hi = vec![0; tx];
        for a in 0..tx {
            let from = if a >= 1 { band.lo[a] } else { band.lo[1] };
            lo[a] = from.saturating_sub(1);
            hi[a] = band.hi[(a + 1).min(tx)].min(ty - 1).max(lo[a]);
        }
        let lens: Vec<usize> = (0..tx).map(|a| hi[a] + 1 - lo[a]).collect();
        let mut offset = vec![0; tx + 1];
        for a in 0..tx {
            offset[a + 1] = offset[a] + lens[a];
        }
        let mut cells = vec![T::zero(); offset[tx]];
        let (xd, yd) = (x.data(), y.data());
        exec.for_each_chunk(&mut cells, &lens, |a, row| {
            let xa = &xd[a * f..(a + 1) * f];
            for (off, c) in row.iter_mut().enumerate() {
                let b = lo[a] + off;
                let yb = &yd[b * f..(b + 1) * f];
                *c = xa.iter().zip(yb).map(|(&p, &q)| (p - q).abs()).sum();
            }
        });
        CostTable { lo, offset, cells }
    }

    fn get(&self, a: usize, b: usize) -> T {
        self.cells[self.offset[a] + b - self.lo[a]]
    }
}

fn check_inputs<T: Real>(
    x: &Tensor<T>,
    y: &Tensor<T>,
    cfg: &SoftDtwConfig,
) -> Result<(usize, usize)> {
    cfg.validate()?;
    let (tx, fx) = x.dims2("soft_dtw")?;
    let (ty, fy) = y.dims2("soft_dtw")?;
    if tx == 0 || ty == 0 {
        return Err(Error::Empty("soft_dtw sequence"));
    }
    if fx != fy {
        return Err(Error::shape(
            "soft_dtw",
            format!("feature dims {fx} vs {fy}"),
        ));
    }
    Ok((tx, ty))
}

/// Branch values into cell `(i, j)`: `[vertical, horizontal, diagonal]`, `+∞` when invalid.
fn branch_values<T: Real>(
    r: &BandTable<T>,
    costs: &CostTable<T>,
    cfg: &SoftDtwConfig,
    i: usize,
    j: usize,
) -> ([T; 3], [(usize, usize); 3]) {
    let (tx, ty) = (r.tx(), r.ty());
    let frames = cfg.cost_indexing.branch_frames(i, j, tx, ty);
    let warp = T::of(cfg.warp);
    let hwarp = if cfg.corrupt_horizontal_warp {
        T::of(cfg.warp + 1.0)
    } else {
        warp
    };
    let inf = T::infinity();
    let src = [r.get(i - 1, j), r.get(i, j - 1), r.get(i - 1, j - 1)];
    let add = [warp, hwarp, T::zero()];
    let mut vals = [inf; 3];
    for b in 0..3 {
        if src[b].is_finite() {
            let (fa, fb) = frames[b];
            vals[b] = src[b] + costs.get(fa, fb) + add[b];
        }
    }
    (vals, frames)
}

fn forward_table<T: Real>(
    x: &Tensor<T>,
    y: &Tensor<T>,
    cfg: &SoftDtwConfig,
    exec: ExecPolicy,
) -> Result<(BandTable<T>, CostTable<T>)> {
    let (tx, ty) = check_inputs(x, y, cfg)?;
    let band = Band::new(tx, ty, cfg.band_half_width);
    let costs = CostTable::build(x, y, &band, exec);
    let mut r = BandTable::new(band, T::infinity());
    let gamma = T::of(cfg.gamma);
    for i in 1..=tx {
        let (lo, hi) = r.band.row(i);
        for j in lo..=hi {
            let (vals, _) = branch_values(&r, &costs, cfg, i, j);
            *r.slot(i, j) = soft_min_unchecked(&vals, gamma);
        }
    }
    Ok((r, costs))
}

/// Soft-DTW loss `r[T_x][T_y]` between target `x` (`T_x×F`) and prediction `y` (`T_y×F`).
pub fn soft_dtw<T: Real>(
    x: &Tensor<T>,
    y: &Tensor<T>,
    cfg: &SoftDtwConfig,
) -> Result<(T, BandTable<T>)> {
    soft_dtw_with(x, y, cfg, ExecPolicy::Sequential)
}

pub fn soft_dtw_with<T: Real>(
    x: &Tensor<T>,
    y: &Tensor<T>,
    cfg: &SoftDtwConfig,
    exec: ExecPolicy,
) -> Result<(T, BandTable<T>)> {
    let (r, _) = forward_table(x, y, cfg, exec)?;
    Ok((r.value(), r))
}

/// Gradient of the loss with respect to the predicted frames `y`.
pub fn soft_dtw_grad<T: Real>(
    x: &Tensor<T>,
    y: &Tensor<T>,
    cfg: &SoftDtwConfig,
) -> Result<Tensor<T>> {
    Ok(soft_dtw_value_and_grad(x, y, cfg, ExecPolicy::Sequential)?.1)
}

/// Loss and gradient wrt `y` in one forward + reverse sweep.
pub fn soft_dtw_value_and_grad<T: Real>(
    x: &Tensor<T>,
    y: &Tensor<T>,
    cfg: &SoftDtwConfig,
    exec: ExecPolicy,
) -> Result<(T, Tensor<T>)> {
    let (r, costs) = forward_table(x, y, cfg, exec)?;
    let (tx, ty) = (r.tx(), r.ty());
    let f = y.shape()[1];
    let mut grad = Tensor::zeros(vec![ty, f]);
    let loss = r.value();
    if !loss.is_finite() {
        return Ok((loss, grad));
    }
    let gamma = T::of(cfg.gamma);
    let mut adj = BandTable::new(r.band.clone(), T::zero());
    *adj.slot(tx, ty) = T::one();
    let (xd, yd) = (x.data(), y.data());
    let gd = grad.data_mut();
    for i in (1..=tx).rev() {
        let (lo, hi) = r.band.row(i);
        for j in (lo..=hi).rev() {
            let e = adj.get(i, j);
            if e == T::zero() {
                continue;
            }
            let rij = r.get(i, j);
            let (vals, frames) = branch_values(&r, &costs, cfg, i, j);
            let sources = [(i - 1, j), (i, j - 1), (i - 1, j - 1)];
            for b in 0..3 {
                if !vals[b].is_finite() {
                    continue;
                }
                let w = e * (-(vals[b] - rij) / gamma).exp();
                let (si, sj) = sources[b];
                if si >= 1 && sj >= 1 {
                    *adj.slot(si, sj) = adj.get(si, sj) + w;
                }
                let (fa, fb) = frames[b];
                for k in 0..f {
                    let diff = xd[fa * f + k] - yd[fb * f + k];
                    gd[fb * f + k] = gd[fb * f + k] - w * sign0(diff);
                }
            }
        }
    }
    Ok((loss, grad))
}
