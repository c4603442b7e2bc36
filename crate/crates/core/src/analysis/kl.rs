//! Exact check of the KL decomposition of the expected log-likelihood,
//! `E[ln L] = -KL(P(y|x) || Q(y|x)) - KL(P(x) || Q(x)) - H(y|x) - H(x)`.

use serde::Serialize;

use crate::error::{Error, Result};

const MAX_OUTCOMES: usize = 10_000;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KlReport {
    pub expected_log_likelihood: f64,
    pub kl_conditional: f64,
    pub kl_marginal: f64,
    pub entropy_y_given_x: f64,
    pub entropy_x: f64,
    /// `E[ln L]` minus the right-hand side of the identity.
    pub residual: f64,
}

fn check_distribution(what: &str, p: &[f64]) -> Result<()> {
    if p.iter().any(|&v| !v.is_finite() || v < 0.0) {
        return Err(Error::InvalidArgument(format!(
            "{what} has a negative or non-finite entry"
        )));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "{what} sums to {total}, not 1"
        )));
    }
    Ok(())
}

fn xlogy(x: f64, y: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * y.ln()
    }
}

/// Evaluates every term by enumerating the `|X| × |Y|` outcomes of
/// `true_joint[x][y]` under the model `model_conditional[x][y]` and
/// `model_marginal[x]`.
pub fn kl_decomposition_check(
    true_joint: &[Vec<f64>],
    model_conditional: &[Vec<f64>],
    model_marginal: &[f64],
) -> Result<KlReport> {
    let nx = true_joint.len();
    let ny = true_joint.first().map_or(0, Vec::len);
    if nx == 0 || ny == 0 {
        return Err(Error::Empty("outcome space"));
    }
    if nx * ny > MAX_OUTCOMES {
        return Err(Error::InvalidArgument(format!(
            "{} outcomes exceed {MAX_OUTCOMES}",
            nx * ny
        )));
    }
    if model_conditional.len() != nx || model_marginal.len() != nx {
        return Err(Error::LengthMismatch {
            what: "model rows",
            expected: nx,
            got: model_conditional.len().min(model_marginal.len()),
        });
    }
    if true_joint
        .iter()
        .chain(model_conditional)
        .any(|r| r.len() != ny)
    {
        return Err(Error::InvalidArgument("ragged probability table".into()));
    }
    check_distribution("true joint", &true_joint.concat())?;
    for row in model_conditional {
        check_distribution("model conditional row", row)?;
    }
    check_distribution("model marginal", model_marginal)?;

    let px: Vec<f64> = true_joint.iter().map(|r| r.iter().sum()).collect();
    let (mut ell, mut kl1, mut kl2, mut hyx, mut hx) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for x in 0..nx {
        if px[x] == 0.0 {
            continue;
        }
        if model_marginal[x] == 0.0 {
            return Err(Error::InfiniteKl { x, y: 0 });
        }
        kl2 += xlogy(px[x], px[x] / model_marginal[x]);
        hx -= xlogy(px[x], px[x]);
        for y in 0..ny {
            let pxy = true_joint[x][y];
            if pxy == 0.0 {
                continue;
            }
            let q = model_conditional[x][y];
            if q == 0.0 {
                return Err(Error::InfiniteKl { x, y });
            }
            let p_cond = pxy / px[x];
            ell += pxy * (q.ln() + model_marginal[x].ln());
            kl1 += pxy * (p_cond / q).ln();
            hyx -= pxy * p_cond.ln();
        }
    }
    Ok(KlReport {
        expected_log_likelihood: ell,
        kl_conditional: kl1,
        kl_marginal: kl2,
        entropy_y_given_x: hyx,
        entropy_x: hx,
        residual: ell - (-kl1 - kl2 - hyx - hx),
    })
}
