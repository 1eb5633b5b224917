//! Limit rough path of the rescaled fast integral: `B = (−C)⁻¹Q^{1/2}W`
//! with a level-2 drift.
//!
//! Itô form: left-point sums of `∫ δB ⊗ dB` plus `(t − s)D`.
//! Stratonovich form: piecewise-linear (midpoint) sums plus `(t − s)M`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::operators::{GeneratorAlgebra, LinearOperator, Tensor2};
use crate::rough::RoughPath;
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LiftForm {
    #[default]
    Ito,
    Stratonovich,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LimitLift<T: Real> {
    pub path: RoughPath<T>,
    pub form: LiftForm,
    pub drift: Tensor2<T>,
    pub correction: Tensor2<T>,
}

impl<T: Real> LimitLift<T> {
    pub fn to_json_value(&self) -> serde_json::Value {
        let mut v = self.path.to_json_value();
        v["form"] = serde_json::to_value(self.form).expect("enum serializes");
        v["drift_d"] = serde_json::to_value(&self.drift).expect("tensor serializes");
        v["correction_m"] = serde_json::to_value(&self.correction).expect("tensor serializes");
        v
    }
}

/// Builds the lift from `Q^{1/2}ΔW` (one column per fine step on `[0, T]`).
pub fn limit_lift<T: Real>(
    increments: &DMatrix<T>,
    t_end: T,
    c: &LinearOperator<T>,
    q: &LinearOperator<T>,
    coarse_level: u32,
    form: LiftForm,
) -> Result<LimitLift<T>> {
    limit_lift_with(&GeneratorAlgebra::new(c, q)?, increments, t_end, coarse_level, form)
}

pub fn limit_lift_with<T: Real>(
    alg: &GeneratorAlgebra<T>,
    increments: &DMatrix<T>,
    t_end: T,
    coarse_level: u32,
    form: LiftForm,
) -> Result<LimitLift<T>> {
    if increments.nrows() != alg.dim() {
        return Err(Error::Shape(format!(
            "increments have dimension {}, operators {}",
            increments.nrows(),
            alg.dim()
        )));
    }
    if increments.ncols() == 0 {
        return Err(Error::Grid("no increments".into()));
    }
    let h = t_end / T::from_usize_lossy(increments.ncols());
    let db = alg.neg_c_inv.matrix() * increments;
    let path = match form {
        LiftForm::Ito => {
            let step = alg.drift.scale(h);
            RoughPath::from_fine(t_end, &db, |_, _| step.clone(), coarse_level)?
        }
        LiftForm::Stratonovich => {
            let step = alg.correction.scale(h);
            RoughPath::from_fine(
                t_end,
                &db,
                |_, dx| {
                    let mut x = step.clone();
                    x.add_outer(dx, dx, T::lit(0.5));
                    x
                },
                coarse_level,
            )?
        }
    };
    Ok(LimitLift {
        path,
        form,
        drift: alg.drift.clone(),
        correction: alg.correction.clone(),
    })
}

/// `max_{s<t} ‖B²_{st}(Itô) − B²_{st}(Stratonovich)‖` for two lifts of one path.
pub fn strat_consistency_check<T: Real>(a: &LimitLift<T>, b: &LimitLift<T>) -> Result<T> {
    if a.form == b.form {
        return Err(Error::Input("need one Itô and one Stratonovich lift".into()));
    }
    if !a.path.level1.same_grid(&b.path.level1) || a.path.level1 != b.path.level1 {
        return Err(Error::Input("lifts are not built from the same path".into()));
    }
    let n = a.path.steps();
    let mut worst = T::zero();
    for s in 0..n {
        for t in (s + 1)..=n {
            worst = worst.max((a.path.level2.get(s, t) - b.path.level2.get(s, t)).norm());
        }
    }
    Ok(worst)
}
