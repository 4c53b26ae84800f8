//! Central-finite-difference gradient verification.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, VarId};

/// Compares the tape gradient of `f` at `x` against central finite
/// differences with step `eps`. Returns the max over coordinates of
/// |analytic - numeric| / max(1, |numeric|).
///
/// `f` must be deterministic and produce a scalar.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, VarId) -> Result<VarId>,
{
    let eval = |probe: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        tape.check_finite = true;
        let id = tape.leaf(probe);
        let y = f(&mut tape, id)?;
        let v = tape.value(y);
        if v.numel() != 1 {
            return Err(Error::NonScalarLoss {
                shape: v.shape().to_vec(),
            });
        }
        Ok(v.item())
    };

    // Analytic pass.
    let mut tape = Tape::new();
    tape.check_finite = true;
    let xid = tape.leaf(&x.clone().with_requires_grad(true));
    let y = f(&mut tape, xid)?;
    if tape.value(y).numel() != 1 {
        return Err(Error::NonScalarLoss {
            shape: tape.shape(y).to_vec(),
        });
    }
    tape.backward(y)?;
    let analytic = tape
        .grad(xid)
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    // Numeric pass, one coordinate at a time.
    let mut max_err: f64 = 0.0;
    let mut probe = x.clone().with_requires_grad(false);
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let err = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1.0);
        max_err = max_err.max(err);
    }
    Ok(max_err)
}
