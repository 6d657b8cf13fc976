use super::{NdiffError, Tensor};

fn check_setup<F>(loss: &mut F, params: &[Tensor<f64>], step: f64) -> Result<(), NdiffError>
where
    F: FnMut(&[Tensor<f64>]) -> f64,
{
    if !(step > 0.0) {
        return Err(NdiffError::BadStep(step));
    }
    let first = loss(params);
    let second = loss(params);
    if first.to_bits() != second.to_bits() && !(first.is_nan() && second.is_nan()) {
        return Err(NdiffError::NonDeterministic { first, second });
    }
    Ok(())
}

fn central<F>(loss: &mut F, params: &mut [Tensor<f64>], t: usize, i: usize, step: f64) -> f64
where
    F: FnMut(&[Tensor<f64>]) -> f64,
{
    let orig = params[t].data()[i];
    params[t].data_mut()[i] = orig + step;
    let up = loss(params);
    params[t].data_mut()[i] = orig - step;
    let down = loss(params);
    params[t].data_mut()[i] = orig;
    (up - down) / (2.0 * step)
}

/// Central-difference gradient of a scalar loss with respect to every entry
/// of every parameter tensor. The loss is evaluated twice at the unperturbed
/// point first; differing results are rejected.
pub fn finite_difference_gradient<F>(
    mut loss: F,
    params: &[Tensor<f64>],
    step: f64,
) -> Result<Vec<Tensor<f64>>, NdiffError>
where
    F: FnMut(&[Tensor<f64>]) -> f64,
{
    check_setup(&mut loss, params, step)?;
    let mut work = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for t in 0..params.len() {
        let mut g = Tensor::zeros(params[t].shape().to_vec());
        for i in 0..params[t].len() {
            g.data_mut()[i] = central(&mut loss, &mut work, t, i, step);
        }
        out.push(g);
    }
    Ok(out)
}

/// Central differences for selected `(tensor, entry)` coordinates only.
pub fn finite_difference_at<F>(
    mut loss: F,
    params: &[Tensor<f64>],
    coords: &[(usize, usize)],
    step: f64,
) -> Result<Vec<f64>, NdiffError>
where
    F: FnMut(&[Tensor<f64>]) -> f64,
{
    check_setup(&mut loss, params, step)?;
    let mut work = params.to_vec();
    Ok(coords
        .iter()
        .map(|&(t, i)| central(&mut loss, &mut work, t, i, step))
        .collect())
}

/// `|a - b| / max(|a|, |b|, floor)`; the floor keeps near-zero pairs from
/// producing meaningless ratios.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
