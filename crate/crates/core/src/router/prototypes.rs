use serde::{Deserialize, Serialize};

use crate::error::{LprError, Result};
use crate::metrics::GaussianRows;
use crate::numerics::{dot, norm, sample_gaussian, Matrix, RngState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    /// Gaussian rows projected onto the unit sphere.
    Hyperspherical,
    /// Raw standard-normal rows.
    Gaussian,
    /// Orthonormal rows (or columns, when there are more experts than
    /// latent dimensions) from Gram-Schmidt on Gaussian draws.
    Orthogonal,
}

/// Expert prototypes: one diagonal Gaussian per expert. Means are the
/// routing keys; log-variances only matter to metrics that read them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertPrototypes {
    /// `M x d_latent`
    pub means: Matrix,
    /// `M x d_latent`
    pub log_vars: Matrix,
    pub unit_ball: bool,
}

impl ExpertPrototypes {
    pub fn new(means: Matrix, log_vars: Matrix, unit_ball: bool) -> Result<Self> {
        if means.shape() != log_vars.shape() {
            return Err(LprError::shape(
                "ExpertPrototypes",
                means.shape(),
                log_vars.shape(),
            ));
        }
        let mut p = ExpertPrototypes {
            means,
            log_vars,
            unit_ball,
        };
        p.enforce_constraints();
        Ok(p)
    }

    pub fn init(
        kind: InitKind,
        rng: &mut RngState,
        experts: usize,
        d_latent: usize,
        unit_ball: bool,
    ) -> Result<Self> {
        if experts == 0 || d_latent == 0 {
            return Err(LprError::param(format!(
                "prototype matrix needs positive dims, got {experts} x {d_latent}"
            )));
        }
        let means = match kind {
            InitKind::Hyperspherical => {
                return hyperspherical_init(rng, experts, d_latent, unit_ball)
            }
            InitKind::Gaussian => sample_gaussian(rng, experts, d_latent),
            InitKind::Orthogonal => orthogonal_rows(rng, experts, d_latent),
        };
        Self::new(means, Matrix::zeros(experts, d_latent), unit_ball)
    }

    pub fn experts(&self) -> usize {
        self.means.rows()
    }

    pub fn d_latent(&self) -> usize {
        self.means.cols()
    }

    pub fn rows(&self) -> GaussianRows<'_> {
        GaussianRows {
            mean: &self.means,
            log_var: &self.log_vars,
        }
    }

    /// Projects every mean row onto the unit ball when the constraint is on.
    pub fn enforce_constraints(&mut self) {
        if self.unit_ball {
            project_unit_ball(&mut self.means);
        }
    }

    pub fn zeros_like(&self) -> Self {
        ExpertPrototypes {
            means: Matrix::zeros(self.means.rows(), self.means.cols()),
            log_vars: Matrix::zeros(self.log_vars.rows(), self.log_vars.cols()),
            unit_ball: self.unit_ball,
        }
    }
}

/// Rows drawn from N(0, I) and scaled to unit length, so the prototypes
/// start spread uniformly over the sphere. Log-variances start at zero.
pub fn hyperspherical_init(
    rng: &mut RngState,
    experts: usize,
    d_latent: usize,
    unit_ball: bool,
) -> Result<ExpertPrototypes> {
    if experts == 0 || d_latent == 0 {
        return Err(LprError::param(format!(
            "prototype matrix needs positive dims, got {experts} x {d_latent}"
        )));
    }
    let mut means = Matrix::zeros(experts, d_latent);
    for r in 0..experts {
        // A zero draw has probability zero, but redraw rather than divide by it.
        loop {
            let row: Vec<f64> = (0..d_latent).map(|_| rng.normal()).collect();
            let n = norm(&row);
            if n > 1e-12 {
                for (dst, v) in means.row_mut(r).iter_mut().zip(row) {
                    *dst = v / n;
                }
                break;
            }
        }
    }
    Ok(ExpertPrototypes {
        means,
        log_vars: Matrix::zeros(experts, d_latent),
        unit_ball,
    })
}

fn orthogonal_rows(rng: &mut RngState, experts: usize, d_latent: usize) -> Matrix {
    if experts <= d_latent {
        gram_schmidt_rows(sample_gaussian(rng, experts, d_latent))
    } else {
        gram_schmidt_rows(sample_gaussian(rng, d_latent, experts)).transpose()
    }
}

fn gram_schmidt_rows(mut m: Matrix) -> Matrix {
    for i in 0..m.rows() {
        for j in 0..i {
            let proj = dot(m.row(i), m.row(j));
            let prev = m.row(j).to_vec();
            for (v, p) in m.row_mut(i).iter_mut().zip(prev) {
                *v -= proj * p;
            }
        }
        let n = norm(m.row(i));
        m.row_mut(i).iter_mut().for_each(|v| *v /= n);
    }
    m
}

/// Rescales rows with norm above 1 back onto the unit sphere.
pub fn project_unit_ball(means: &mut Matrix) {
    for r in 0..means.rows() {
        let n = norm(means.row(r));
        if n > 1.0 {
            means.row_mut(r).iter_mut().for_each(|v| *v /= n);
        }
    }
}
