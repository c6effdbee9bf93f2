use super::{Architecture, Gradient, LayerLayout, ParamVector};
use crate::data::Batch;
use crate::{Error, Result};

const BN_EPS: f64 = 1e-5;

struct HiddenCache {
    /// Value fed to the ReLU (BN output when BN is on, else the affine output).
    pre_relu: Vec<f64>,
    /// Normalized affine output and per-unit inverse std, BN only.
    norm: Option<(Vec<f64>, Vec<f64>)>,
}

struct Forward {
    /// Input to each layer, row-major `batch x inputs`.
    inputs: Vec<Vec<f64>>,
    hidden: Vec<HiddenCache>,
    logits: Vec<f64>,
}

fn check_batch(params: &ParamVector, batch: &Batch<'_>, arch: &Architecture) -> Result<Vec<LayerLayout>> {
    arch.validate()?;
    let layout = arch.layout();
    let dim = layout.last().map_or(0, |l| l.span().end);
    if params.dim() != dim {
        return Err(Error::ShapeMismatch(format!(
            "parameter vector has {} entries, architecture needs {dim}",
            params.dim()
        )));
    }
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    if batch.input_dim != arch.input_dim() || batch.features.len() != batch.len() * batch.input_dim {
        return Err(Error::ShapeMismatch(format!(
            "batch feature width {} does not match network input {}",
            batch.input_dim,
            arch.input_dim()
        )));
    }
    if let Some(&bad) = batch.labels.iter().find(|&&y| y >= arch.output_dim()) {
        return Err(Error::InvalidInput(format!(
            "label {bad} out of range for {} outputs",
            arch.output_dim()
        )));
    }
    Ok(layout)
}

fn affine(w: &[f64], bias: &[f64], input: &[f64], rows: usize, inputs: usize, outputs: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * outputs];
    for b in 0..rows {
        let x = &input[b * inputs..(b + 1) * inputs];
        let z = &mut out[b * outputs..(b + 1) * outputs];
        for (o, zo) in z.iter_mut().enumerate() {
            let row = &w[o * inputs..(o + 1) * inputs];
            *zo = bias[o] + row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>();
        }
    }
    out
}

fn forward(values: &[f64], layout: &[LayerLayout], batch: &Batch<'_>) -> Result<Forward> {
    let rows = batch.len();
    let mut inputs = Vec::with_capacity(layout.len());
    let mut hidden = Vec::with_capacity(layout.len().saturating_sub(1));
    let mut current = batch.features.to_vec();
    for (l, layer) in layout.iter().enumerate() {
        let mut z = affine(
            &values[layer.weights.clone()],
            &values[layer.bias.clone()],
            &current,
            rows,
            layer.inputs,
            layer.outputs,
        );
        inputs.push(std::mem::take(&mut current));
        if l + 1 == layout.len() {
            if z.iter().any(|v| !v.is_finite()) {
                return Err(Error::NumericalOverflow("non-finite logits".into()));
            }
            return Ok(Forward {
                inputs,
                hidden,
                logits: z,
            });
        }
        let n = layer.outputs;
        let norm = layer.norm.as_ref().map(|(scale, shift)| {
            let gamma = &values[scale.clone()];
            let beta = &values[shift.clone()];
            let mut zhat = vec![0.0; z.len()];
            let mut inv_std = vec![0.0; n];
            for o in 0..n {
                let mean = (0..rows).map(|b| z[b * n + o]).sum::<f64>() / rows as f64;
                let var = (0..rows).map(|b| (z[b * n + o] - mean).powi(2)).sum::<f64>() / rows as f64;
                let is = (var + BN_EPS).sqrt().recip();
                inv_std[o] = is;
                for b in 0..rows {
                    let h = (z[b * n + o] - mean) * is;
                    zhat[b * n + o] = h;
                    z[b * n + o] = gamma[o] * h + beta[o];
                }
            }
            (zhat, inv_std)
        });
        current = z.iter().map(|&v| v.max(0.0)).collect();
        hidden.push(HiddenCache { pre_relu: z, norm });
    }
    unreachable!("layout has at least one layer")
}

/// Mean cross-entropy over the batch and its gradient with respect to every
/// parameter. With batch norm on, statistics are taken over this batch.
pub fn loss_and_grad(params: &ParamVector, batch: &Batch<'_>, arch: &Architecture) -> Result<(f64, Gradient)> {
    let layout = check_batch(params, batch, arch)?;
    let values = &params.values;
    let fwd = forward(values, &layout, batch)?;
    let rows = batch.len();
    let k = arch.output_dim();

    // softmax cross-entropy
    let mut dz = vec![0.0; rows * k];
    let mut total = 0.0;
    for b in 0..rows {
        let z = &fwd.logits[b * k..(b + 1) * k];
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let y = batch.labels[b];
        total += lse - z[y];
        for c in 0..k {
            let p = (z[c] - lse).exp();
            dz[b * k + c] = (p - if c == y { 1.0 } else { 0.0 }) / rows as f64;
        }
    }
    let loss = total / rows as f64;
    if !loss.is_finite() {
        return Err(Error::NumericalOverflow(format!("loss is {loss}")));
    }

    let mut grad = vec![0.0; values.len()];
    for l in (0..layout.len()).rev() {
        let layer = &layout[l];
        let (ni, no) = (layer.inputs, layer.outputs);
        let input = &fwd.inputs[l];
        let w = &values[layer.weights.clone()];
        {
            let (gw, gb) = {
                let (left, right) = grad.split_at_mut(layer.bias.start);
                (&mut left[layer.weights.clone()], &mut right[..no])
            };
            for b in 0..rows {
                let x = &input[b * ni..(b + 1) * ni];
                for o in 0..no {
                    let g = dz[b * no + o];
                    if g == 0.0 {
                        continue;
                    }
                    gb[o] += g;
                    for (gwi, xi) in gw[o * ni..(o + 1) * ni].iter_mut().zip(x) {
                        *gwi += g * xi;
                    }
                }
            }
        }
        if l == 0 {
            break;
        }
        // back through the previous hidden layer's ReLU (and BN)
        let mut da = vec![0.0; rows * ni];
        for b in 0..rows {
            let row = &mut da[b * ni..(b + 1) * ni];
            for o in 0..no {
                let g = dz[b * no + o];
                if g == 0.0 {
                    continue;
                }
                for (d, wi) in row.iter_mut().zip(&w[o * ni..(o + 1) * ni]) {
                    *d += g * wi;
                }
            }
        }
        let cache = &fwd.hidden[l - 1];
        for (d, &y) in da.iter_mut().zip(&cache.pre_relu) {
            if y <= 0.0 {
                *d = 0.0;
            }
        }
        let prev = &layout[l - 1];
        dz = match (&prev.norm, &cache.norm) {
            (Some((scale, shift)), Some((zhat, inv_std))) => {
                let n = prev.outputs;
                let gamma = &values[scale.clone()];
                let mut out = vec![0.0; rows * n];
                for o in 0..n {
                    let mut sum_dy = 0.0;
                    let mut sum_dy_zhat = 0.0;
                    for b in 0..rows {
                        sum_dy += da[b * n + o];
                        sum_dy_zhat += da[b * n + o] * zhat[b * n + o];
                    }
                    grad[shift.start + o] = sum_dy;
                    grad[scale.start + o] = sum_dy_zhat;
                    let c = gamma[o] * inv_std[o] / rows as f64;
                    for b in 0..rows {
                        out[b * n + o] =
                            c * (rows as f64 * da[b * n + o] - sum_dy - zhat[b * n + o] * sum_dy_zhat);
                    }
                }
                out
            }
            _ => da,
        };
    }
    Ok((loss, Gradient { values: grad }))
}

pub fn loss(params: &ParamVector, batch: &Batch<'_>, arch: &Architecture) -> Result<f64> {
    let layout = check_batch(params, batch, arch)?;
    let fwd = forward(&params.values, &layout, batch)?;
    let k = arch.output_dim();
    let mut total = 0.0;
    for (b, &y) in batch.labels.iter().enumerate() {
        let z = &fwd.logits[b * k..(b + 1) * k];
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        total += max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln() - z[y];
    }
    let loss = total / batch.len() as f64;
    if !loss.is_finite() {
        return Err(Error::NumericalOverflow(format!("loss is {loss}")));
    }
    Ok(loss)
}

/// Arg-max class per row (first index on ties).
pub fn predict(params: &ParamVector, batch: &Batch<'_>, arch: &Architecture) -> Result<Vec<usize>> {
    let layout = check_batch(params, batch, arch)?;
    let fwd = forward(&params.values, &layout, batch)?;
    let k = arch.output_dim();
    Ok(fwd
        .logits
        .chunks(k)
        .map(|z| {
            z.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect())
}

/// Sign pattern of every hidden ReLU input. Finite-difference checks use it
/// to recognise perturbations that cross a kink.
pub fn activation_pattern(params: &ParamVector, batch: &Batch<'_>, arch: &Architecture) -> Result<Vec<bool>> {
    let layout = check_batch(params, batch, arch)?;
    let fwd = forward(&params.values, &layout, batch)?;
    Ok(fwd
        .hidden
        .iter()
        .flat_map(|h| h.pre_relu.iter().map(|&v| v > 0.0))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_blobs, Dataset};
    use crate::nn::init_params;

    #[test]
    fn uniform_logits_give_log_k() {
        let arch = Architecture::new(vec![3, 5, 4]).unwrap();
        let mut p = init_params(&arch, 1).unwrap();
        // zero the output layer so every logit is 0
        let last = arch.layout()[1].span();
        p.values[last].iter_mut().for_each(|v| *v = 0.0);
        let ds = synth_blobs(4, 3, 5, 0.5, 0).unwrap();
        let l = loss(&p, &ds.as_batch(), &arch).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn duplicated_batch_gives_same_loss_and_grad() {
        let arch = Architecture::new(vec![2, 6, 3]).unwrap();
        let p = init_params(&arch, 4).unwrap();
        let ds = synth_blobs(3, 2, 4, 0.5, 1).unwrap();
        let idx: Vec<usize> = (0..ds.len()).flat_map(|i| [i, i]).collect();
        let dup = ds.select(&idx);
        let (l1, g1) = loss_and_grad(&p, &ds.as_batch(), &arch).unwrap();
        let (l2, g2) = loss_and_grad(&p, &dup.as_batch(), &arch).unwrap();
        assert!((l1 - l2).abs() < 1e-14);
        for (a, b) in g1.values.iter().zip(&g2.values) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn overflow_is_reported() {
        let arch = Architecture::new(vec![1, 2]).unwrap();
        let p = ParamVector::from_values(&arch, vec![f64::MAX, f64::MAX, 0.0, 0.0]).unwrap();
        let ds = Dataset::new(vec![10.0], vec![0], 1, 2).unwrap();
        assert!(matches!(
            loss_and_grad(&p, &ds.as_batch(), &arch),
            Err(Error::NumericalOverflow(_))
        ));
    }

    #[test]
    fn batch_shape_checked() {
        let arch = Architecture::new(vec![3, 2]).unwrap();
        let p = init_params(&arch, 0).unwrap();
        let ds = synth_blobs(2, 2, 2, 0.1, 0).unwrap();
        assert!(matches!(loss(&p, &ds.as_batch(), &arch), Err(Error::ShapeMismatch(_))));
        let empty = ds.select(&[]);
        assert!(loss(&p, &empty.as_batch(), &arch).is_err());
    }
}
