use ndarray::{Array2, Axis};

use super::{optimize, StepEval, TrainConfig, TrainError, TrainLog};
use crate::media::{make_coord_grid, make_coord_grid_3d, psnr_from_mse, ImageTensor, MediaError};
use crate::quant::rate_bits;
use crate::siren::{ArchitectureSpec, Lattice, Network};

/// Input points and target values for fitting one network.
#[derive(Clone, Debug)]
pub struct FitTarget {
    /// Points the first layer is evaluated on (the coarse lattice for
    /// upsampling networks).
    pub coords: Array2<f64>,
    pub lattice: Option<Lattice>,
    /// One row per output pixel.
    pub target: Array2<f64>,
}

impl FitTarget {
    /// An image, laid out for `spec`'s input lattice.
    pub fn image(image: &ImageTensor, spec: &ArchitectureSpec) -> Result<Self, TrainError> {
        let (h, w) = (image.height(), image.width());
        let (coords, lattice) = if spec.has_upsample() {
            let n = spec.upsample_factor;
            if h % n != 0 || w % n != 0 {
                return Err(crate::siren::SirenError::UpsampleMismatch {
                    height: h,
                    width: w,
                    factor: n,
                }
                .into());
            }
            let lat = Lattice {
                height: h / n,
                width: w / n,
            };
            (make_coord_grid(lat.height, lat.width)?.coords().to_owned(), Some(lat))
        } else {
            (make_coord_grid(h, w)?.coords().to_owned(), None)
        };
        Ok(FitTarget {
            coords,
            lattice,
            target: image.to_rows(),
        })
    }

    /// A block of equally sized frames on an `(x, y, t)` grid.
    pub fn frames(frames: &[ImageTensor]) -> Result<Self, TrainError> {
        let first = frames
            .first()
            .ok_or_else(|| MediaError::InvalidData("empty frame block".into()))?;
        let (h, w) = (first.height(), first.width());
        if let Some(f) = frames.iter().find(|f| f.shape() != first.shape()) {
            return Err(MediaError::ShapeMismatch(first.shape(), f.shape()).into());
        }
        let grid = make_coord_grid_3d(frames.len(), h, w)?;
        let views: Vec<_> = frames.iter().map(|f| f.as_rows()).collect();
        let target = ndarray::concatenate(Axis(0), &views).expect("equal widths");
        Ok(FitTarget {
            coords: grid.coords().to_owned(),
            lattice: None,
            target,
        })
    }

    pub fn rows(&self) -> usize {
        self.target.nrows()
    }

    /// Mean squared error of `net` on the whole target.
    pub fn mse(&self, net: &Network, quantized: bool) -> Result<f64, TrainError> {
        let pred = net.forward_points(self.coords.view(), self.lattice, quantized)?;
        check_shape(&pred, &self.target)?;
        Ok(mean_sq_diff(&pred, &self.target))
    }

    /// Distortion and gradient for one optimization step.
    pub fn step(
        &self,
        net: &Network,
        quantized: bool,
        sample: Option<&[usize]>,
    ) -> Result<StepEval, TrainError> {
        let c = self.target.ncols();
        match (sample, self.lattice) {
            (Some(rows), None) => {
                let coords = self.coords.select(Axis(0), rows);
                let target = self.target.select(Axis(0), rows);
                let (pred, cache) = net.forward_cached(coords.view(), None, quantized)?;
                check_shape(&pred, &target)?;
                let (d, g) = mse_and_grad(&pred, &target, None, c);
                let grads = net.backward(&cache, g.view(), true)?;
                Ok(StepEval {
                    distortion: d,
                    grads: vec![grads.layers],
                })
            }
            _ => {
                let (pred, cache) =
                    net.forward_cached(self.coords.view(), self.lattice, quantized)?;
                check_shape(&pred, &self.target)?;
                let (d, g) = mse_and_grad(&pred, &self.target, sample, c);
                let grads = net.backward(&cache, g.view(), true)?;
                Ok(StepEval {
                    distortion: d,
                    grads: vec![grads.layers],
                })
            }
        }
    }
}

fn check_shape(pred: &Array2<f64>, target: &Array2<f64>) -> Result<(), TrainError> {
    if pred.dim() != target.dim() {
        return Err(TrainError::ShapeMismatch(format!(
            "prediction {:?} vs target {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    Ok(())
}

pub(crate) fn mean_sq_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len().max(1) as f64
}

/// Mean squared error over `rows` (all rows when `None`) and its gradient
/// with respect to `pred`, zero outside the selected rows.
pub(crate) fn mse_and_grad(
    pred: &Array2<f64>,
    target: &Array2<f64>,
    rows: Option<&[usize]>,
    channels: usize,
) -> (f64, Array2<f64>) {
    match rows {
        None => {
            let n = pred.len() as f64;
            let diff = pred - target;
            let d = diff.iter().map(|v| v * v).sum::<f64>() / n;
            (d, diff * (2.0 / n))
        }
        Some(rows) => {
            let n = (rows.len() * channels) as f64;
            let mut g = Array2::zeros(pred.raw_dim());
            let mut d = 0.0;
            for &r in rows {
                for c in 0..channels {
                    let e = pred[[r, c]] - target[[r, c]];
                    d += e * e;
                    g[[r, c]] = 2.0 * e / n;
                }
            }
            (d / n, g)
        }
    }
}

/// A trained network with its quantizers and training history.
#[derive(Clone, Debug)]
pub struct TrainedNetwork {
    /// Full-precision weights with the learned quantizers attached.
    pub network: Network,
    /// The network a decoder reconstructs from the stored integers.
    pub decoded: Network,
    pub log: TrainLog,
    /// PSNR of the full-precision weights.
    pub psnr_full: f64,
    /// PSNR of the decoded network.
    pub psnr_quantized: f64,
    /// Integer payload bits per parameter.
    pub mean_bits: f64,
}

/// Full-precision pretraining (distortion only), then quantization-aware
/// training on `D + beta * R`. Either stage may be skipped; quantizers are
/// attached before the second stage if the network has none.
pub fn train_fit(
    target: &FitTarget,
    mut net: Network,
    pretrain: Option<&TrainConfig>,
    qat: Option<&TrainConfig>,
) -> Result<TrainedNetwork, TrainError> {
    let rows = target.rows();
    let mut log = TrainLog::default();
    if let Some(cfg) = pretrain {
        let mut nets = [net];
        let l = optimize(&mut nets, cfg, false, rows, |n, s| target.step(&n[0], false, s))?;
        log.append(l, 0);
        [net] = nets;
    }
    if !net.has_quantizers() {
        net.attach_quantizers()?;
    }
    if let Some(cfg) = qat {
        let offset = pretrain.map_or(0, |c| c.steps);
        let mut nets = [net];
        let l = optimize(&mut nets, cfg, true, rows, |n, s| target.step(&n[0], true, s))?;
        log.append(l, offset);
        [net] = nets;
    }
    let decoded = Network::from_quantized(net.spec(), &net.export_quantized()?)?;
    let psnr_full = psnr_from_mse(target.mse(&net, false)?);
    let psnr_quantized = psnr_from_mse(target.mse(&decoded, false)?);
    let mean_bits = rate_bits(&net)?.mean_payload();
    Ok(TrainedNetwork {
        network: net,
        decoded,
        log,
        psnr_full,
        psnr_quantized,
        mean_bits,
    })
}

/// Fits a freshly initialized network (seeded by `pretrain.seed`) to an
/// image: full-precision pretraining, then quantization-aware training.
pub fn train_image(
    image: &ImageTensor,
    spec: &ArchitectureSpec,
    pretrain: &TrainConfig,
    qat: &TrainConfig,
) -> Result<TrainedNetwork, TrainError> {
    let target = FitTarget::image(image, spec)?;
    let net = Network::init(spec, pretrain.seed)?;
    train_fit(&target, net, Some(pretrain), Some(qat))
}
