use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{adam_step, lr_at, AdamState, Batch, LogRow, TrainConfig, TrainError, TrainLog};
use crate::media::psnr_from_mse;
use crate::quant::{quantize_backward, rate_bits, smooth_bitwidth_grad, ChannelQuantizer};
use crate::siren::{Layer, Network};

/// Distortion at the current parameters and its gradient for every
/// trained network, taken with respect to the parameters the forward pass
/// used (quantized values during quantization-aware training).
#[derive(Clone, Debug)]
pub struct StepEval {
    pub distortion: f64,
    pub grads: Vec<Vec<Layer>>,
}

#[derive(Clone)]
struct NetState {
    weights: AdamState,
    quant: Option<AdamState>,
}

fn quantizer_list(net: &Network) -> Vec<&ChannelQuantizer> {
    net.quantizers()
        .map(|qs| qs.iter().flat_map(|q| [&q.weight, &q.bias]).collect())
        .unwrap_or_default()
}

/// `[ln s..., ln theta_max...]` over all channels of all quantizers.
fn quant_log_params(net: &Network) -> Vec<f64> {
    let qs = quantizer_list(net);
    let s = qs.iter().flat_map(|q| q.s().iter().map(|v| v.ln()));
    let t = qs.iter().flat_map(|q| q.theta_max().iter().map(|v| v.ln()));
    s.chain(t).collect()
}

fn set_quant_log_params(net: &mut Network, params: &[f64]) {
    let half = params.len() / 2;
    let mut k = 0;
    for lq in net.quantizers_mut().expect("quantized training") {
        for q in [&mut lq.weight, &mut lq.bias] {
            for c in 0..q.channels() {
                q.set_channel(c, params[k].exp(), params[half + k].exp());
                k += 1;
            }
        }
    }
}

fn flatten(layers: &[Layer]) -> Vec<f64> {
    let mut out = Vec::new();
    for l in layers {
        out.extend(l.weight.iter());
        out.extend(l.bias.iter());
    }
    out
}

/// Chains distortion gradients through the quantizers and adds the rate
/// term. Returns flat weight gradients and log-space quantizer gradients.
fn chain_quantized(
    net: &Network,
    grads: &[Layer],
    beta: f64,
    total_params: f64,
) -> Result<(Vec<f64>, Vec<f64>), TrainError> {
    let qs = net.quantizers().expect("quantized training");
    let mut weight_grads = Vec::with_capacity(net.num_params());
    let mut gs = Vec::new();
    let mut gt = Vec::new();
    for ((layer, grad), lq) in net.layers().iter().zip(grads).zip(qs) {
        let parts = [
            (layer.weight.view(), grad.weight.view(), &lq.weight),
            (layer.bias_row(), grad.bias.view().insert_axis(ndarray::Axis(0)), &lq.bias),
        ];
        let mut flat_parts = Vec::with_capacity(2);
        for (values, upstream, q) in parts {
            let qg = quantize_backward(values, q, upstream)?;
            let row_len = values.ncols() as f64;
            for c in 0..q.channels() {
                let (s, t) = (q.s()[c], q.theta_max()[c]);
                let (rs, rt) = smooth_bitwidth_grad(s, t);
                let scale = beta * row_len / total_params;
                gs.push(s * (qg.s[c] + scale * rs));
                gt.push(t * (qg.theta_max[c] + scale * rt));
            }
            flat_parts.push(qg.values);
        }
        weight_grads.extend(flat_parts[0].iter());
        weight_grads.extend(flat_parts[1].iter());
    }
    gs.extend(gt);
    Ok((weight_grads, gs))
}

fn sample_rows(rng: &mut ChaCha8Rng, rows: usize, batch: Batch) -> Option<Vec<usize>> {
    match batch {
        Batch::Random(n) if n < rows => {
            let mut idx = rand::seq::index::sample(rng, rows, n).into_vec();
            idx.sort_unstable();
            Some(idx)
        }
        _ => None,
    }
}

/// Runs `cfg.steps` Adam steps on `nets`.
///
/// `eval` receives the networks and, for random batches, the sorted
/// subset of the `rows` loss rows to use. With `quantized` set, every
/// network must carry quantizers; their `ln s` and `ln theta_max` are
/// trained at `cfg.quant_lr_scale` times the weight learning rate on
/// `D + beta * R`, with `R` the mean smooth bitwidth over all parameters
/// of all networks.
///
/// A non-finite loss or gradient restores the last logged checkpoint and
/// halves the learning rate; a second occurrence aborts.
pub fn optimize<F>(
    nets: &mut [Network],
    cfg: &TrainConfig,
    quantized: bool,
    rows: usize,
    mut eval: F,
) -> Result<TrainLog, TrainError>
where
    F: FnMut(&[Network], Option<&[usize]>) -> Result<StepEval, TrainError>,
{
    cfg.validate()?;
    if quantized && nets.iter().any(|n| !n.has_quantizers()) {
        return Err(TrainError::Quant(crate::quant::QuantError::MissingQuantizer));
    }
    let total_params = nets.iter().map(Network::num_params).sum::<usize>() as f64;
    let mut states: Vec<NetState> = nets
        .iter()
        .map(|n| NetState {
            weights: AdamState::new(n.num_params()),
            quant: quantized.then(|| AdamState::new(quant_log_params(n).len())),
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = TrainLog::default();
    let mut lr_scale = 1.0;
    let mut checkpoint = (nets.to_vec(), states.clone());

    for step in 0..cfg.steps {
        let lr = lr_at(step, cfg)? * lr_scale;
        let sample = sample_rows(&mut rng, rows, cfg.batch);
        let ev = eval(nets, sample.as_deref())?;
        if ev.grads.len() != nets.len() {
            return Err(TrainError::ShapeMismatch(format!(
                "{} gradient sets for {} networks",
                ev.grads.len(),
                nets.len()
            )));
        }
        let (smooth, payload) = if quantized {
            nets.iter().try_fold((0.0, 0.0), |(s, p), n| {
                let r = rate_bits(n)?;
                Ok::<_, TrainError>((s + r.smooth, p + r.payload as f64))
            })?
        } else {
            (0.0, 0.0)
        };
        let loss = ev.distortion + cfg.beta * smooth / total_params;

        let mut updates = Vec::with_capacity(nets.len());
        let mut finite = loss.is_finite();
        if finite {
            for (net, grads) in nets.iter().zip(&ev.grads) {
                let (wg, qg) = if quantized {
                    let (wg, qg) = chain_quantized(net, grads, cfg.beta, total_params)?;
                    (wg, Some(qg))
                } else {
                    (flatten(grads), None)
                };
                if wg.len() != net.num_params() {
                    return Err(TrainError::ShapeMismatch("gradient layout".into()));
                }
                if wg.iter().chain(qg.iter().flatten()).any(|g| !g.is_finite()) {
                    finite = false;
                    break;
                }
                updates.push((wg, qg));
            }
        }
        if !finite {
            if lr_scale < 1.0 {
                return Err(TrainError::Diverged { step, loss });
            }
            log::warn!("non-finite loss at step {step}; restoring checkpoint and halving the learning rate");
            lr_scale = 0.5;
            nets.clone_from_slice(&checkpoint.0);
            states = checkpoint.1.clone();
            continue;
        }

        if step % cfg.log_every == 0 || step + 1 == cfg.steps {
            log.rows.push(LogRow {
                step,
                distortion: ev.distortion,
                rate: payload / total_params,
                psnr: psnr_from_mse(ev.distortion),
            });
            checkpoint = (nets.to_vec(), states.clone());
            log::debug!("step {step}: D={:.3e} R={:.3} loss={loss:.3e}", ev.distortion, payload / total_params);
        }

        for ((net, state), (wg, qg)) in nets.iter_mut().zip(states.iter_mut()).zip(updates) {
            let mut params = net.params_flat();
            adam_step(&mut params, &wg, &mut state.weights, lr)?;
            net.set_params_flat(&params);
            if let (Some(qg), Some(qstate)) = (qg, state.quant.as_mut()) {
                let mut qp = quant_log_params(net);
                adam_step(&mut qp, &qg, qstate, lr * cfg.quant_lr_scale)?;
                set_quant_log_params(net, &qp);
            }
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::siren::ArchitectureSpec;
    use ndarray::Array2;

    #[test]
    fn quant_params_round_trip() {
        let spec = ArchitectureSpec::siren(3, 4).unwrap();
        let mut net = Network::init(&spec, 1).unwrap();
        net.attach_quantizers().unwrap();
        let before = net.clone();
        let p = quant_log_params(&net);
        assert_eq!(p.len(), 2 * (4 + 1 + 4 + 1 + 3 + 1));
        set_quant_log_params(&mut net, &p);
        for (a, b) in before.quantizers().unwrap().iter().zip(net.quantizers().unwrap()) {
            for (x, y) in a.weight.s().iter().zip(b.weight.s()) {
                assert!((x - y).abs() <= 1e-15 * x.abs());
            }
        }
    }

    #[test]
    fn diverging_objective_aborts_after_one_halving() {
        let spec = ArchitectureSpec::siren(2, 2).unwrap();
        let mut nets = vec![Network::init(&spec, 0).unwrap()];
        let mut calls = 0;
        let cfg = TrainConfig::new(10, 1e-3, 1e-3);
        let err = optimize(&mut nets, &cfg, false, 1, |nets, _| {
            calls += 1;
            let grads = nets[0]
                .layers()
                .iter()
                .map(|l| Layer {
                    weight: Array2::zeros(l.weight.raw_dim()),
                    bias: ndarray::Array1::zeros(l.bias.len()),
                })
                .collect();
            let d = if calls >= 3 { f64::NAN } else { 1.0 };
            Ok(StepEval {
                distortion: d,
                grads: vec![grads],
            })
        })
        .unwrap_err();
        assert!(matches!(err, TrainError::Diverged { .. }));
        assert_eq!(calls, 4);
    }

    #[test]
    fn random_batches_are_seeded_and_sorted() {
        let mut a = ChaCha8Rng::seed_from_u64(4);
        let mut b = ChaCha8Rng::seed_from_u64(4);
        let x = sample_rows(&mut a, 100, Batch::Random(10)).unwrap();
        assert_eq!(Some(x.clone()), sample_rows(&mut b, 100, Batch::Random(10)));
        assert!(x.windows(2).all(|w| w[0] < w[1]));
        assert!(sample_rows(&mut a, 5, Batch::Random(10)).is_none());
        assert!(sample_rows(&mut a, 5, Batch::Full).is_none());
    }
}
