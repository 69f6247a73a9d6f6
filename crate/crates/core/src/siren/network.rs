use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::spec::{ArchitectureSpec, LayerKind};
use super::upsample::{upsample_bilinear, upsample_bilinear_backward};
use super::SirenError;
use crate::media::{make_coord_grid, CoordGrid};
use crate::par;
use crate::quant::{init_quantizer, quantize, ChannelQuantizer, QuantError, QuantizedTensor};

/// Weight matrix (`fan_out x fan_in`) and bias of one learnable layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Layer {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Layer {
            weight: Array2::zeros((fan_out, fan_in)),
            bias: Array1::zeros(fan_out),
        }
    }

    /// The bias as a single-row matrix, the shape its quantizer sees.
    pub fn bias_row(&self) -> ArrayView2<'_, f64> {
        self.bias.view().insert_axis(Axis(0))
    }
}

/// Quantizers for one layer: one channel per weight row, one for the bias.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerQuantizers {
    pub weight: ChannelQuantizer,
    pub bias: ChannelQuantizer,
}

/// Arrangement of the input points, required when the network upsamples.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Lattice {
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    spec: ArchitectureSpec,
    layers: Vec<Layer>,
    quantizers: Option<Vec<LayerQuantizers>>,
}

/// Per-chunk activations kept for the backward pass.
#[derive(Debug)]
struct ChunkCache {
    /// `acts[l]` is the input of layer `l`; the last entry is the output.
    acts: Vec<Array2<f64>>,
    /// Elementwise derivative of each layer's activation, `None` for identity.
    derivs: Vec<Option<Array2<f64>>>,
}

#[derive(Debug)]
struct StageCache {
    ranges: Vec<std::ops::Range<usize>>,
    chunks: Vec<ChunkCache>,
}

/// State captured by [`Network::forward_cached`].
#[derive(Debug)]
pub struct ForwardCache {
    layers: Vec<Layer>,
    lattice: Option<Lattice>,
    rows_in: usize,
    rows_out: usize,
    stages: Vec<StageCache>,
}

/// Gradients of a scalar loss.
#[derive(Clone, Debug)]
pub struct Gradients {
    /// Per-layer weight and bias gradients; empty when parameter gradients
    /// were not requested.
    pub layers: Vec<Layer>,
    /// Gradient with respect to every input coordinate.
    pub inputs: Array2<f64>,
}

fn uniform(rng: &mut ChaCha8Rng, bound: f64) -> f64 {
    if bound == 0.0 {
        0.0
    } else {
        rng.random_range(-bound..bound)
    }
}

impl Network {
    /// Deterministic initialization from `seed`.
    ///
    /// The first sine layer draws from `U(-1/fan_in, 1/fan_in)`; later
    /// sine and linear layers from `U(-c, c)` with `c = sqrt(6/fan_in)/omega0`;
    /// ReLU layers from the same rule without the `omega0` division. Biases
    /// start at zero.
    pub fn init(spec: &ArchitectureSpec, seed: u64) -> Result<Network, SirenError> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let omega = f64::from(spec.omega0);
        let kinds = spec.learnable_layers();
        let layers = spec
            .layer_shapes()
            .into_iter()
            .zip(&kinds)
            .enumerate()
            .map(|(i, ((fan_in, fan_out), kind))| {
                let hidden = (6.0 / fan_in as f64).sqrt();
                let bound = match kind {
                    LayerKind::Sine if i == 0 => 1.0 / fan_in as f64,
                    LayerKind::Sine | LayerKind::Linear => hidden / omega,
                    LayerKind::Relu => hidden,
                };
                let weight =
                    Array2::from_shape_simple_fn((fan_out, fan_in), || uniform(&mut rng, bound));
                Layer {
                    weight,
                    bias: Array1::zeros(fan_out),
                }
            })
            .collect();
        Ok(Network {
            spec: spec.clone(),
            layers,
            quantizers: None,
        })
    }

    /// A network with every weight and bias set to zero.
    pub fn zeros(spec: &ArchitectureSpec) -> Result<Network, SirenError> {
        spec.validate()?;
        Ok(Network {
            spec: spec.clone(),
            layers: spec
                .layer_shapes()
                .into_iter()
                .map(|(i, o)| Layer::zeros(i, o))
                .collect(),
            quantizers: None,
        })
    }

    pub fn from_layers(spec: &ArchitectureSpec, layers: Vec<Layer>) -> Result<Network, SirenError> {
        spec.validate()?;
        let shapes = spec.layer_shapes();
        if shapes.len() != layers.len() {
            return Err(SirenError::ShapeMismatch(format!(
                "{} layers for a {}-layer spec",
                layers.len(),
                shapes.len()
            )));
        }
        for (l, (fan_in, fan_out)) in layers.iter().zip(&shapes) {
            if l.weight.dim() != (*fan_out, *fan_in) || l.bias.len() != *fan_out {
                return Err(SirenError::ShapeMismatch(format!(
                    "layer {:?}/{} does not match ({fan_out}, {fan_in})",
                    l.weight.dim(),
                    l.bias.len()
                )));
            }
            if l.weight.iter().chain(l.bias.iter()).any(|v| !v.is_finite()) {
                return Err(SirenError::InvalidSpec("non-finite parameter".into()));
            }
        }
        Ok(Network {
            spec: spec.clone(),
            layers,
            quantizers: None,
        })
    }

    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    /// All parameters, layer by layer: weights row-major, then the bias.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn set_params_flat(&mut self, values: &[f64]) {
        assert_eq!(values.len(), self.num_params(), "parameter count");
        let mut it = values.iter();
        for l in &mut self.layers {
            for (dst, src) in l.weight.iter_mut().chain(l.bias.iter_mut()).zip(&mut it) {
                *dst = *src;
            }
        }
    }

    pub fn quantizers(&self) -> Option<&[LayerQuantizers]> {
        self.quantizers.as_deref()
    }

    pub fn quantizers_mut(&mut self) -> Option<&mut [LayerQuantizers]> {
        self.quantizers.as_deref_mut()
    }

    pub fn has_quantizers(&self) -> bool {
        self.quantizers.is_some()
    }

    /// Initializes one quantizer per weight tensor and bias from the
    /// current parameter values.
    pub fn attach_quantizers(&mut self) -> Result<(), QuantError> {
        let qs = self
            .layers
            .iter()
            .map(|l| {
                Ok(LayerQuantizers {
                    weight: init_quantizer(l.weight.view())?,
                    bias: init_quantizer(l.bias_row())?,
                })
            })
            .collect::<Result<Vec<_>, QuantError>>()?;
        self.quantizers = Some(qs);
        Ok(())
    }

    pub fn set_quantizers(&mut self, quantizers: Vec<LayerQuantizers>) -> Result<(), SirenError> {
        let ok = quantizers.len() == self.layers.len()
            && quantizers.iter().zip(&self.layers).all(|(q, l)| {
                q.weight.channels() == l.weight.nrows() && q.bias.channels() == 1
            });
        if !ok {
            return Err(SirenError::ShapeMismatch("quantizer layout".into()));
        }
        self.quantizers = Some(quantizers);
        Ok(())
    }

    pub fn clear_quantizers(&mut self) {
        self.quantizers = None;
    }

    /// The parameters the forward pass uses: raw, or passed through the
    /// attached quantizers.
    pub fn effective_layers(&self, quantized: bool) -> Result<Vec<Layer>, SirenError> {
        if !quantized {
            return Ok(self.layers.clone());
        }
        let qs = self
            .quantizers
            .as_ref()
            .ok_or_else(|| SirenError::ShapeMismatch("no quantizers attached".into()))?;
        self.layers
            .iter()
            .zip(qs)
            .map(|(l, q)| {
                let weight = quantize(l.weight.view(), &q.weight)
                    .map_err(|e| SirenError::ShapeMismatch(e.to_string()))?;
                let bias = quantize(l.bias_row(), &q.bias)
                    .map_err(|e| SirenError::ShapeMismatch(e.to_string()))?
                    .remove_axis(Axis(0));
                Ok(Layer { weight, bias })
            })
            .collect()
    }

    /// Fixed-point tensors for storage: per layer the weight, then the bias.
    pub fn export_quantized(&self) -> Result<Vec<QuantizedTensor>, QuantError> {
        let qs = self.quantizers.as_ref().ok_or(QuantError::MissingQuantizer)?;
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for (l, q) in self.layers.iter().zip(qs) {
            out.push(QuantizedTensor::from_values(l.weight.view(), &q.weight)?);
            out.push(QuantizedTensor::from_values(l.bias_row(), &q.bias)?);
        }
        Ok(out)
    }

    /// Rebuilds the network a decoder sees from stored tensors.
    pub fn from_quantized(
        spec: &ArchitectureSpec,
        tensors: &[QuantizedTensor],
    ) -> Result<Network, SirenError> {
        let shapes = spec.layer_shapes();
        if tensors.len() != 2 * shapes.len() {
            return Err(SirenError::ShapeMismatch(format!(
                "{} tensors for {} layers",
                tensors.len(),
                shapes.len()
            )));
        }
        let layers = shapes
            .iter()
            .zip(tensors.chunks(2))
            .map(|(&(fan_in, fan_out), pair)| {
                let weight = pair[0].dequantize();
                let bias = pair[1].dequantize();
                if weight.dim() != (fan_out, fan_in) || bias.dim() != (1, fan_out) {
                    return Err(SirenError::ShapeMismatch(format!(
                        "tensor shapes {:?}/{:?} vs layer ({fan_out}, {fan_in})",
                        weight.dim(),
                        bias.dim()
                    )));
                }
                Ok(Layer {
                    weight,
                    bias: bias.remove_axis(Axis(0)),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Network::from_layers(spec, layers)
    }

    /// The lattice the first layer runs on for an output of `height x width`.
    pub fn input_lattice(&self, height: usize, width: usize) -> Result<Lattice, SirenError> {
        let n = if self.spec.has_upsample() {
            self.spec.upsample_factor
        } else {
            1
        };
        if !height.is_multiple_of(n) || !width.is_multiple_of(n) {
            return Err(SirenError::UpsampleMismatch {
                height,
                width,
                factor: n,
            });
        }
        Ok(Lattice {
            height: height / n,
            width: width / n,
        })
    }

    /// Evaluates the network at every grid point. Upsampling networks run
    /// their first stage on the `(H/n, W/n)` grid and return `H x W` rows.
    pub fn forward(&self, grid: &CoordGrid, quantized: bool) -> Result<Array2<f64>, SirenError> {
        if self.spec.has_upsample() {
            let lat = self.input_lattice(grid.height(), grid.width())?;
            let coarse = make_coord_grid(lat.height, lat.width)
                .map_err(|e| SirenError::ShapeMismatch(e.to_string()))?;
            self.forward_points(coarse.coords(), Some(lat), quantized)
        } else {
            self.forward_points(grid.coords(), None, quantized)
        }
    }

    /// Evaluates at arbitrary input points. `lattice` describes how the
    /// points are arranged and is required when the network upsamples.
    pub fn forward_points(
        &self,
        coords: ArrayView2<f64>,
        lattice: Option<Lattice>,
        quantized: bool,
    ) -> Result<Array2<f64>, SirenError> {
        let layers = self.effective_layers(quantized)?;
        self.check_inputs(&coords, lattice)?;
        let kinds = self.spec.learnable_layers();
        let omega = f64::from(self.spec.omega0);
        let mut x = coords.to_owned();
        for (idx, range) in self.stage_bounds().into_iter().enumerate() {
            if idx > 0 {
                let lat = lattice.expect("checked");
                x = upsample_bilinear(x.view(), lat.height, lat.width, self.spec.upsample_factor)?;
            }
            let stage_layers = &layers[range.clone()];
            let stage_kinds = &kinds[range];
            let ranges = par::chunk_ranges(x.nrows());
            let input = x.view();
            let parts = par::map_indexed(ranges.len(), |c| {
                eval_chunk(stage_layers, stage_kinds, omega, input.slice(s![ranges[c].clone(), ..]))
            });
            x = concat_rows(parts, stage_layers.last().map_or(x.ncols(), |l| l.weight.nrows()));
        }
        Ok(x)
    }

    /// Forward pass that keeps what [`Network::backward`] needs.
    pub fn forward_cached(
        &self,
        coords: ArrayView2<f64>,
        lattice: Option<Lattice>,
        quantized: bool,
    ) -> Result<(Array2<f64>, ForwardCache), SirenError> {
        let layers = self.effective_layers(quantized)?;
        self.check_inputs(&coords, lattice)?;
        let kinds = self.spec.learnable_layers();
        let omega = f64::from(self.spec.omega0);
        let mut x = coords.to_owned();
        let mut stages = Vec::new();
        for (idx, range) in self.stage_bounds().into_iter().enumerate() {
            if idx > 0 {
                let lat = lattice.expect("checked");
                x = upsample_bilinear(x.view(), lat.height, lat.width, self.spec.upsample_factor)?;
            }
            let stage_layers = &layers[range.clone()];
            let stage_kinds = &kinds[range];
            let ranges = par::chunk_ranges(x.nrows());
            let input = x.view();
            let chunks = par::map_indexed(ranges.len(), |c| {
                cached_chunk(stage_layers, stage_kinds, omega, input.slice(s![ranges[c].clone(), ..]))
            });
            let width = stage_layers.last().map_or(x.ncols(), |l| l.weight.nrows());
            x = concat_rows(
                chunks.iter().map(|c| c.acts.last().expect("input").clone()).collect(),
                width,
            );
            stages.push(StageCache { ranges, chunks });
        }
        let cache = ForwardCache {
            layers,
            lattice,
            rows_in: coords.nrows(),
            rows_out: x.nrows(),
            stages,
        };
        Ok((x, cache))
    }

    /// Exact reverse-mode gradients for the forward pass recorded in `cache`.
    ///
    /// Gradients are taken with respect to the parameters the forward pass
    /// used (the quantized values when it ran quantized). Chunk
    /// contributions are summed in a fixed order, so the result does not
    /// depend on the number of workers.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        output_grad: ArrayView2<f64>,
        param_grads: bool,
    ) -> Result<Gradients, SirenError> {
        if output_grad.dim() != (cache.rows_out, self.spec.out_dim) {
            return Err(SirenError::ShapeMismatch(format!(
                "output gradient {:?}, expected ({}, {})",
                output_grad.dim(),
                cache.rows_out,
                self.spec.out_dim
            )));
        }
        let bounds = self.stage_bounds();
        let mut layer_grads: Vec<Layer> = Vec::new();
        let mut grad = output_grad.to_owned();
        for (idx, range) in bounds.iter().enumerate().rev() {
            let stage = &cache.stages[idx];
            let stage_layers = &cache.layers[range.clone()];
            let g = grad.view();
            let results = par::map_indexed(stage.chunks.len(), |c| {
                backward_chunk(
                    stage_layers,
                    &stage.chunks[c],
                    g.slice(s![stage.ranges[c].clone(), ..]),
                    param_grads,
                )
            });
            let in_width = stage.chunks.first().map_or(0, |c| c.acts[0].ncols());
            let mut stage_grads: Option<Vec<Layer>> = None;
            let mut inputs = Vec::with_capacity(results.len());
            for (lg, dx) in results {
                if let Some(lg) = lg {
                    match &mut stage_grads {
                        None => stage_grads = Some(lg),
                        Some(acc) => {
                            for (a, b) in acc.iter_mut().zip(lg) {
                                a.weight += &b.weight;
                                a.bias += &b.bias;
                            }
                        }
                    }
                }
                inputs.push(dx);
            }
            grad = concat_rows(inputs, in_width);
            if param_grads {
                let sg = stage_grads.unwrap_or_else(|| {
                    stage_layers
                        .iter()
                        .map(|l| Layer::zeros(l.weight.ncols(), l.weight.nrows()))
                        .collect()
                });
                let mut sg = sg;
                sg.append(&mut layer_grads);
                layer_grads = sg;
            }
            if idx > 0 {
                let lat = cache.lattice.expect("checked at forward");
                grad = upsample_bilinear_backward(
                    grad.view(),
                    lat.height,
                    lat.width,
                    self.spec.upsample_factor,
                )?;
            }
        }
        debug_assert_eq!(grad.nrows(), cache.rows_in);
        Ok(Gradients {
            layers: layer_grads,
            inputs: grad,
        })
    }

    #[allow(clippy::single_range_in_vec_init)]
    fn stage_bounds(&self) -> Vec<std::ops::Range<usize>> {
        let n = self.layers.len();
        match self.spec.upsample_position() {
            Some(k) => vec![0..k, k..n],
            None => vec![0..n],
        }
    }

    fn check_inputs(
        &self,
        coords: &ArrayView2<f64>,
        lattice: Option<Lattice>,
    ) -> Result<(), SirenError> {
        if coords.ncols() != self.spec.in_dim {
            return Err(SirenError::ShapeMismatch(format!(
                "{}-d inputs for a {}-d network",
                coords.ncols(),
                self.spec.in_dim
            )));
        }
        if self.spec.has_upsample() {
            match lattice {
                Some(l) if l.height * l.width == coords.nrows() => {}
                _ => {
                    return Err(SirenError::ShapeMismatch(
                        "upsampling networks need a lattice matching the inputs".into(),
                    ))
                }
            }
        }
        Ok(())
    }
}

/// Creates and initializes a network; see [`Network::init`].
pub fn init_network(spec: &ArchitectureSpec, seed: u64) -> Result<Network, SirenError> {
    Network::init(spec, seed)
}

fn concat_rows(parts: Vec<Array2<f64>>, width: usize) -> Array2<f64> {
    match parts.len() {
        0 => Array2::zeros((0, width)),
        1 => parts.into_iter().next().expect("one part"),
        _ => {
            let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
            concatenate(Axis(0), &views).expect("equal widths")
        }
    }
}

fn affine(layer: &Layer, x: ArrayView2<f64>) -> Array2<f64> {
    let mut z = x.dot(&layer.weight.t());
    z += &layer.bias;
    z
}

fn eval_chunk(
    layers: &[Layer],
    kinds: &[LayerKind],
    omega: f64,
    input: ArrayView2<f64>,
) -> Array2<f64> {
    let mut x = input.to_owned();
    for (layer, kind) in layers.iter().zip(kinds) {
        let mut z = affine(layer, x.view());
        match kind {
            LayerKind::Sine => z.mapv_inplace(|v| (omega * v).sin()),
            LayerKind::Relu => z.mapv_inplace(|v| v.max(0.0)),
            LayerKind::Linear => {}
        }
        x = z;
    }
    x
}

fn cached_chunk(
    layers: &[Layer],
    kinds: &[LayerKind],
    omega: f64,
    input: ArrayView2<f64>,
) -> ChunkCache {
    let mut acts = Vec::with_capacity(layers.len() + 1);
    let mut derivs = Vec::with_capacity(layers.len());
    acts.push(input.to_owned());
    for (layer, kind) in layers.iter().zip(kinds) {
        let mut z = affine(layer, acts.last().expect("input").view());
        let deriv = match kind {
            LayerKind::Sine => {
                let d = z.mapv(|v| omega * (omega * v).cos());
                z.mapv_inplace(|v| (omega * v).sin());
                Some(d)
            }
            LayerKind::Relu => {
                let d = z.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                z.mapv_inplace(|v| v.max(0.0));
                Some(d)
            }
            LayerKind::Linear => None,
        };
        acts.push(z);
        derivs.push(deriv);
    }
    ChunkCache { acts, derivs }
}

fn backward_chunk(
    layers: &[Layer],
    cache: &ChunkCache,
    grad_out: ArrayView2<f64>,
    param_grads: bool,
) -> (Option<Vec<Layer>>, Array2<f64>) {
    let mut grads: Vec<Layer> = Vec::new();
    let mut g = grad_out.to_owned();
    for l in (0..layers.len()).rev() {
        if let Some(d) = &cache.derivs[l] {
            g *= d;
        }
        if param_grads {
            grads.push(Layer {
                weight: g.t().dot(&cache.acts[l]),
                bias: g.sum_axis(Axis(0)),
            });
        }
        g = g.dot(&layers[l].weight);
    }
    grads.reverse();
    (param_grads.then_some(grads), g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::media::make_coord_grid;

    /// Straightforward per-point evaluation with explicit loops.
    fn reference_eval(net: &Network, point: &[f64]) -> Vec<f64> {
        let omega = f64::from(net.spec().omega0);
        let mut x = point.to_vec();
        for (layer, kind) in net.layers().iter().zip(net.spec().learnable_layers()) {
            let mut y = vec![0.0; layer.weight.nrows()];
            for (o, yo) in y.iter_mut().enumerate() {
                let mut acc = layer.bias[o];
                for (i, xi) in x.iter().enumerate() {
                    acc += layer.weight[[o, i]] * xi;
                }
                *yo = match kind {
                    LayerKind::Sine => (omega * acc).sin(),
                    LayerKind::Relu => acc.max(0.0),
                    LayerKind::Linear => acc,
                };
            }
            x = y;
        }
        x
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let spec = ArchitectureSpec::siren(4, 8).unwrap();
        let a = Network::init(&spec, 7).unwrap();
        let b = Network::init(&spec, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, Network::init(&spec, 8).unwrap());
        assert!(a.layers()[0].weight.iter().all(|w| w.abs() <= 1.0 / 2.0));
        let hidden = (6.0f64 / 8.0).sqrt() / 30.0;
        for l in &a.layers()[1..3] {
            assert!(l.weight.iter().all(|w| w.abs() <= hidden));
        }
        assert!(a.layers()[3].weight.iter().all(|w| w.abs() <= (6.0f64 / 8.0).sqrt()));
        assert!(a.layers().iter().all(|l| l.bias.iter().all(|b| *b == 0.0)));
        assert_eq!(a.num_params(), spec.param_count());
    }

    #[test]
    fn zero_network_outputs_zero() {
        let spec = ArchitectureSpec::siren(4, 8).unwrap();
        let net = Network::zeros(&spec).unwrap();
        let out = net.forward(&make_coord_grid(5, 5).unwrap(), false).unwrap();
        assert!(out.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn matches_reference_evaluation() {
        let spec = ArchitectureSpec::siren(4, 8).unwrap();
        let mut net = Network::init(&spec, 3).unwrap();
        // Non-zero biases exercise the bias path.
        for (i, l) in net.layers_mut().iter_mut().enumerate() {
            l.bias.mapv_inplace(|_| 0.01 * (i as f64 + 1.0));
        }
        let grid = make_coord_grid(5, 5).unwrap();
        let out = net.forward(&grid, false).unwrap();
        for (p, row) in grid.coords().rows().into_iter().enumerate() {
            let expect = reference_eval(&net, &row.to_vec());
            for (a, b) in out.row(p).iter().zip(&expect) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn upsample_factor_one_matches_plain() {
        let plain = ArchitectureSpec::new("SSSC", 6, 2, 3).unwrap();
        let up = ArchitectureSpec::new("SSUSC", 6, 2, 3)
            .unwrap()
            .with_upsample_factor(1)
            .unwrap();
        let a = Network::init(&plain, 11).unwrap();
        let b = Network::from_layers(&up, a.layers().to_vec()).unwrap();
        let grid = make_coord_grid(6, 4).unwrap();
        assert_eq!(a.forward(&grid, false).unwrap(), b.forward(&grid, false).unwrap());
    }

    #[test]
    fn upsampling_shapes() {
        let spec = ArchitectureSpec::usiren(4, 6).unwrap();
        let net = Network::init(&spec, 1).unwrap();
        let out = net.forward(&make_coord_grid(8, 6).unwrap(), false).unwrap();
        assert_eq!(out.dim(), (48, 3));
        assert!(matches!(
            net.forward(&make_coord_grid(7, 6).unwrap(), false),
            Err(SirenError::UpsampleMismatch { .. })
        ));
        let grid = make_coord_grid(4, 4).unwrap();
        assert!(net.forward_points(grid.coords(), None, false).is_err());
    }

    #[test]
    fn forward_is_chunk_invariant() {
        let spec = ArchitectureSpec::siren(3, 5).unwrap();
        let net = Network::init(&spec, 2).unwrap();
        let grid = make_coord_grid(40, 30).unwrap();
        let all = net.forward(&grid, false).unwrap();
        let (cached, _) = net.forward_cached(grid.coords(), None, false).unwrap();
        assert_eq!(all, cached);
        let one = net
            .forward_points(grid.coords().slice(s![700..701, ..]), None, false)
            .unwrap();
        assert_eq!(one.row(0), all.row(700));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let spec = ArchitectureSpec::usiren(4, 5).unwrap();
        let net = Network::init(&spec, 9).unwrap();
        let lat = net.input_lattice(4, 4).unwrap();
        let coarse = make_coord_grid(lat.height, lat.width).unwrap();
        let (out, cache) = net.forward_cached(coarse.coords(), Some(lat), false).unwrap();
        let g = net.backward(&cache, Array2::zeros(out.raw_dim()).view(), true).unwrap();
        assert!(g.layers.iter().all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| *v == 0.0)));
        assert!(g.inputs.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_linear_layer_gradient() {
        let spec = ArchitectureSpec::new("L", 4, 2, 2).unwrap();
        let mut net = Network::zeros(&spec).unwrap();
        net.layers_mut()[0].weight = ndarray::array![[1.0, 0.0], [0.0, 1.0]];
        let coords = ndarray::array![[0.3, -0.7]];
        let (_, cache) = net.forward_cached(coords.view(), None, false).unwrap();
        let up = ndarray::array![[2.0, 5.0]];
        let g = net.backward(&cache, up.view(), true).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(g.layers[0].weight[[i, j]], coords[[0, j]] * up[[0, i]]);
            }
        }
        assert_eq!(g.layers[0].bias.to_vec(), vec![2.0, 5.0]);
        assert_eq!(g.inputs.row(0).to_vec(), vec![2.0, 5.0]);
    }

    #[test]
    fn backward_shape_mismatch() {
        let spec = ArchitectureSpec::siren(2, 4).unwrap();
        let net = Network::init(&spec, 0).unwrap();
        let grid = make_coord_grid(3, 3).unwrap();
        let (_, cache) = net.forward_cached(grid.coords(), None, false).unwrap();
        let bad = Array2::zeros((9, 2));
        assert!(matches!(
            net.backward(&cache, bad.view(), true),
            Err(SirenError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn flat_params_round_trip() {
        let spec = ArchitectureSpec::siren(3, 4).unwrap();
        let a = Network::init(&spec, 5).unwrap();
        let mut b = Network::zeros(&spec).unwrap();
        b.set_params_flat(&a.params_flat());
        assert_eq!(a, b);
    }

    #[test]
    fn quantized_forward_requires_quantizers() {
        let spec = ArchitectureSpec::siren(2, 4).unwrap();
        let mut net = Network::init(&spec, 0).unwrap();
        let grid = make_coord_grid(2, 2).unwrap();
        assert!(net.forward(&grid, true).is_err());
        net.attach_quantizers().unwrap();
        let q = net.forward(&grid, true).unwrap();
        let decoded = Network::from_quantized(&spec, &net.export_quantized().unwrap()).unwrap();
        let d = decoded.forward(&grid, false).unwrap();
        for (a, b) in q.iter().zip(d.iter()) {
            assert!((a - b).abs() < 1e-4);
        }
    }
}
