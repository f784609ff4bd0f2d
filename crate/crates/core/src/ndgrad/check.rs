use super::{GradError, Result, Tape, Tensor};

/// Compares reverse-mode gradients of `loss_fn` against central differences.
///
/// `loss_fn` receives one tensor per entry of `params`, either tracked on a
/// fresh tape (analytic pass) or as plain constants (probes), and must be
/// deterministic. Returns the largest
/// `|analytic - central| / max(|analytic|, |central|, 1e-12)` over all elements.
pub fn finite_difference_check<F>(loss_fn: F, params: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    if !(step > 0.0) {
        return Err(GradError::InvalidArgument {
            op: "finite_difference_check",
            detail: format!("step must be positive, got {step}"),
        });
    }
    let tape = Tape::new();
    let tracked: Vec<Tensor> = params.iter().map(|p| tape.param(p.detach())).collect();
    let loss = loss_fn(&tracked)?;
    let analytic = if loss.is_tracked() {
        loss.backward()?.into_vecs()
    } else {
        if loss.numel() != 1 {
            return Err(GradError::NotScalar(loss.shape().to_vec()));
        }
        // The loss never touched a parameter.
        params.iter().map(|p| vec![0.0; p.numel()]).collect()
    };

    let mut probe: Vec<Tensor> = params.iter().map(Tensor::detach).collect();
    let mut worst = 0.0f64;
    for (pi, param) in params.iter().enumerate() {
        for ei in 0..param.numel() {
            let mut eval = |delta: f64| -> Result<f64> {
                let mut values = param.values().to_vec();
                values[ei] += delta;
                probe[pi] = Tensor::new(param.shape(), values)?;
                let l = loss_fn(&probe).map_err(|e| match e {
                    GradError::Domain { .. } => GradError::NonFiniteProbe {
                        param: pi,
                        index: ei,
                    },
                    other => other,
                })?;
                let l = l.item()?;
                if !l.is_finite() {
                    return Err(GradError::NonFiniteProbe {
                        param: pi,
                        index: ei,
                    });
                }
                Ok(l)
            };
            let plus = eval(step)?;
            let minus = eval(-step)?;
            probe[pi] = param.detach();
            let central = (plus - minus) / (2.0 * step);
            let a = analytic[pi][ei];
            let denom = a.abs().max(central.abs()).max(1e-12);
            worst = worst.max((a - central).abs() / denom);
        }
    }
    Ok(worst)
}
