//! Video coding with implicit flow warping.
//!
//! A GoP starts with an I-frame network `f`. Every following frame `t` is
//! predicted as `f(p + D_{t-1} + h_t(p)) + r_t(p)`, where `p` runs over the
//! input lattice of `f`, `D` is the running sum of decoded flows, `h_t` is a
//! small flow network and `r_t` an optional residual network evaluated on
//! the output pixel grid.

use std::collections::BTreeMap;
use std::io::Write;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bitstream::{Accounting, BitstreamError, Document, FrameRecord, Header};
use crate::media::{make_coord_grid, mse, psnr_from_mse, CoordGrid, ImageTensor, MediaError};
use crate::quant::{QuantError, QuantizedTensor};
use crate::siren::{ArchitectureSpec, Lattice, Network, SirenError};
use crate::trainer::{
    load_presets, mse_and_grad, optimize, train_fit, FitTarget, StepEval, TrainConfig, TrainError,
};

#[derive(Debug, Error)]
pub enum VidflowError {
    #[error("no frames to encode")]
    NoFrames,
    #[error("frame {index} is {found:?}, expected {expected:?}")]
    FrameShape {
        index: usize,
        expected: (usize, usize, usize),
        found: (usize, usize, usize),
    },
    #[error("invalid codec configuration: {0}")]
    InvalidConfig(String),
    #[error("frame {index}: {message}")]
    Record { index: usize, message: String },
    #[error("non-finite rate-distortion loss")]
    NonFiniteLoss,
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Siren(#[from] SirenError),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Media(#[from] MediaError),
    #[error(transparent)]
    Bitstream(#[from] BitstreamError),
}

/// Whether P-frames carry a residual network.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResidualMode {
    /// Every P-frame has a residual.
    #[serde(alias = "on")]
    Always,
    #[serde(alias = "off")]
    Never,
    /// Decided per GoP by comparing finished rate-distortion losses.
    #[default]
    Auto,
}

impl FromStr for ResidualMode {
    type Err = VidflowError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "on" | "always" => Ok(ResidualMode::Always),
            "off" | "never" => Ok(ResidualMode::Never),
            "auto" => Ok(ResidualMode::Auto),
            _ => Err(VidflowError::InvalidConfig(format!(
                "residual mode {s:?} (expected auto, on or off)"
            ))),
        }
    }
}

/// Working points: name, base layers, base channels, flow/residual channels.
pub const WORKING_POINTS: [(&str, usize, usize, usize); 11] = [
    ("kodak-1", 5, 20, 24),
    ("kodak-2", 5, 30, 24),
    ("kodak-3", 10, 28, 24),
    ("kodak-4", 10, 40, 24),
    ("kodak-5", 13, 49, 24),
    ("kodak-6", 13, 59, 24),
    ("kodak-7", 13, 66, 24),
    ("clic", 12, 101, 32),
    ("small", 12, 50, 24),
    ("medium", 12, 79, 32),
    ("large", 12, 127, 32),
];

/// uSIREN bases for the video working points: name, layers, channels,
/// flow/residual channels.
pub const USIREN_WORKING_POINTS: [(&str, usize, usize, usize); 3] = [
    ("usiren-small", 13, 47, 24),
    ("usiren-medium", 13, 76, 32),
    ("usiren-large", 13, 121, 32),
];

/// Learnable layers of the flow and residual networks.
pub const SIDE_NETWORK_LAYERS: usize = 6;
pub const DEFAULT_GOP: usize = 5;
pub const DEFAULT_STEPS_SCALE: f64 = 0.05;

/// Everything the encoder needs besides the frames.
#[derive(Clone, Debug, PartialEq)]
pub struct CodecConfig {
    pub base: ArchitectureSpec,
    pub flow: ArchitectureSpec,
    pub residual: ArchitectureSpec,
    pub gop_size: usize,
    /// Rate weight of every quantization-aware stage.
    pub beta: f64,
    /// Multiplier on every schedule's step count.
    pub steps_scale: f64,
    pub seed: u64,
    pub residual_mode: ResidualMode,
    /// Training schedules by stage name, before step scaling.
    pub schedules: BTreeMap<String, TrainConfig>,
}

impl CodecConfig {
    pub fn new(base: ArchitectureSpec, side_channels: usize) -> Result<Self, VidflowError> {
        Ok(CodecConfig {
            base,
            flow: ArchitectureSpec::flow(SIDE_NETWORK_LAYERS, side_channels)?,
            residual: ArchitectureSpec::residual(SIDE_NETWORK_LAYERS, side_channels)?,
            gop_size: DEFAULT_GOP,
            beta: crate::trainer::BETA_LOW_RATE,
            steps_scale: DEFAULT_STEPS_SCALE,
            seed: 0,
            residual_mode: ResidualMode::Auto,
            schedules: load_presets("")?,
        })
    }

    /// A named working point with default settings.
    pub fn working_point(name: &str) -> Result<Self, VidflowError> {
        if let Some(&(_, layers, channels, side)) = WORKING_POINTS.iter().find(|w| w.0 == name) {
            return Self::new(ArchitectureSpec::siren(layers, channels)?, side);
        }
        if let Some(&(_, layers, channels, side)) =
            USIREN_WORKING_POINTS.iter().find(|w| w.0 == name)
        {
            return Self::new(ArchitectureSpec::usiren(layers, channels)?, side);
        }
        Err(VidflowError::InvalidConfig(format!("unknown working point {name:?}")))
    }

    pub fn validate(&self) -> Result<(), VidflowError> {
        let bad = |m: String| Err(VidflowError::InvalidConfig(m));
        if self.gop_size == 0 || self.gop_size > usize::from(u8::MAX) {
            return bad(format!("GoP size {} outside 1..=255", self.gop_size));
        }
        if !(self.steps_scale > 0.0 && self.steps_scale <= 1.0) {
            return bad(format!("step scale {} outside (0, 1]", self.steps_scale));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad(format!("beta {} must be finite and non-negative", self.beta));
        }
        if self.base.in_dim != 2 || self.base.out_dim != 3 {
            return bad("the base network must map (x, y) to RGB".into());
        }
        if (self.flow.in_dim, self.flow.out_dim) != (2, 2) {
            return bad("the flow network must map (x, y) to a displacement".into());
        }
        if (self.residual.in_dim, self.residual.out_dim) != (2, 3) {
            return bad("the residual network must map (x, y) to RGB".into());
        }
        for stage in STAGES {
            self.schedules
                .get(stage)
                .ok_or_else(|| VidflowError::InvalidConfig(format!("missing schedule {stage:?}")))?
                .validate()?;
        }
        Ok(())
    }

    /// The schedule of `stage`, scaled and carrying this config's rate
    /// weight and a seed derived from `salt`.
    pub fn schedule(&self, stage: &str, salt: u64) -> Result<TrainConfig, VidflowError> {
        let cfg = self
            .schedules
            .get(stage)
            .ok_or_else(|| VidflowError::InvalidConfig(format!("missing schedule {stage:?}")))?;
        Ok(cfg
            .clone()
            .scaled(self.steps_scale)
            .with_beta(self.beta)
            .with_seed(self.seed.wrapping_add(salt)))
    }

    pub fn header(&self, width: usize, height: usize, frames: usize) -> Result<Header, VidflowError> {
        let too_big = |what: &str| VidflowError::InvalidConfig(format!("{what} does not fit the format"));
        let header = Header {
            width: u16::try_from(width).map_err(|_| too_big("width"))?,
            height: u16::try_from(height).map_err(|_| too_big("height"))?,
            frame_count: u32::try_from(frames).map_err(|_| too_big("frame count"))?,
            gop_size: u8::try_from(self.gop_size).map_err(|_| too_big("GoP size"))?,
            base: self.base.clone(),
            flow: self.flow.clone(),
            residual: self.residual.clone(),
        };
        header.validate()?;
        Ok(header)
    }
}

/// Stage names the encoder looks up in [`CodecConfig::schedules`].
pub const STAGES: [&str; 9] = [
    "initial-iframe",
    "other-iframe",
    "initial-flow",
    "initial-flow-quant",
    "other-flow-quant",
    "residual-training",
    "residual-quant",
    "image-pretrain",
    "image-qat",
];

/// Running sum of decoded displacements on the base network's input lattice.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowAccumulator {
    height: usize,
    width: usize,
    /// One `(dx, dy)` row per lattice point.
    delta: Array2<f64>,
}

impl FlowAccumulator {
    pub fn zeros(height: usize, width: usize) -> Self {
        FlowAccumulator {
            height,
            width,
            delta: Array2::zeros((height * width, 2)),
        }
    }

    pub fn constant(height: usize, width: usize, d: [f64; 2]) -> Self {
        let mut acc = Self::zeros(height, width);
        for mut row in acc.delta.rows_mut() {
            row[0] = d[0];
            row[1] = d[1];
        }
        acc
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn delta(&self) -> ArrayView2<'_, f64> {
        self.delta.view()
    }

    pub fn is_zero(&self) -> bool {
        self.delta.iter().all(|v| *v == 0.0)
    }

    fn check(&self, grid: &CoordGrid) -> Result<(), VidflowError> {
        if (grid.height(), grid.width()) != (self.height, self.width) || grid.dims() != 2 {
            return Err(SirenError::ShapeMismatch(format!(
                "{}x{} grid for a {}x{} accumulator",
                grid.height(),
                grid.width(),
                self.height,
                self.width
            ))
            .into());
        }
        Ok(())
    }
}

/// Input lattice of `base` for an output of `height x width`: the grid its
/// first layer runs on and the lattice to pass to upsampling networks.
pub fn base_grid(
    base: &Network,
    height: usize,
    width: usize,
) -> Result<(CoordGrid, Option<Lattice>), VidflowError> {
    let lat = base.input_lattice(height, width)?;
    let grid = make_coord_grid(lat.height, lat.width)?;
    Ok((grid, base.spec().has_upsample().then_some(lat)))
}

fn flow_quantized(net: &Network) -> bool {
    net.has_quantizers()
}

/// `acc + flow(grid)`, evaluated on the base lattice. A network with
/// quantizers attached is evaluated with its quantized weights.
pub fn accumulate_flow(
    acc: &FlowAccumulator,
    flow: &Network,
    grid: &CoordGrid,
) -> Result<FlowAccumulator, VidflowError> {
    acc.check(grid)?;
    let d = flow.forward_points(grid.coords(), None, flow_quantized(flow))?;
    if d.ncols() != 2 {
        return Err(SirenError::ShapeMismatch("flow output must be 2-D".into()).into());
    }
    Ok(FlowAccumulator {
        delta: &acc.delta + &d,
        ..acc.clone()
    })
}

/// Predicted P-frame on the `height x width` output grid:
/// `base(p + acc(p) + flow(p)) + residual(x)`.
pub fn eval_pframe(
    base: &Network,
    acc: &FlowAccumulator,
    flow: &Network,
    residual: Option<&Network>,
    height: usize,
    width: usize,
) -> Result<Array2<f64>, VidflowError> {
    let (grid, lattice) = base_grid(base, height, width)?;
    acc.check(&grid)?;
    let d = flow.forward_points(grid.coords(), None, flow_quantized(flow))?;
    let points = &grid.coords() + &acc.delta + &d;
    let mut out = base.forward_points(points.view(), lattice, base.has_quantizers())?;
    if let Some(r) = residual {
        let fine = make_coord_grid(height, width)?;
        out += &r.forward_points(fine.coords(), None, r.has_quantizers())?;
    }
    Ok(out)
}

/// True when the residual lowers the loss; ties exclude it.
pub fn residual_decision(rd_with: f64, rd_without: f64) -> Result<bool, VidflowError> {
    if !rd_with.is_finite() || !rd_without.is_finite() {
        return Err(VidflowError::NonFiniteLoss);
    }
    Ok(rd_with < rd_without)
}

/// Replays frame records into pictures. Shared by the decoder and the
/// encoder's final reconstruction.
#[derive(Clone, Debug)]
pub struct Decoder {
    header: Header,
    next: usize,
    base: Option<Network>,
    acc: Option<FlowAccumulator>,
    grid: CoordGrid,
    lattice: Option<Lattice>,
    fine: CoordGrid,
}

impl Decoder {
    pub fn new(header: Header) -> Result<Self, VidflowError> {
        header.validate()?;
        let (h, w) = (usize::from(header.height), usize::from(header.width));
        let probe = Network::zeros(&header.base)?;
        let (grid, lattice) = base_grid(&probe, h, w)?;
        Ok(Decoder {
            fine: make_coord_grid(h, w)?,
            header,
            next: 0,
            base: None,
            acc: None,
            grid,
            lattice,
        })
    }

    pub fn header(&self) -> &Header {
        &self.header
    }

    /// Index of the next frame to decode.
    pub fn position(&self) -> usize {
        self.next
    }

    /// The current GoP's decoded I-frame network.
    pub fn base(&self) -> Option<&Network> {
        self.base.as_ref()
    }

    pub fn accumulator(&self) -> Option<&FlowAccumulator> {
        self.acc.as_ref()
    }

    /// Input lattice of the base network.
    pub fn base_grid(&self) -> (&CoordGrid, Option<Lattice>) {
        (&self.grid, self.lattice)
    }

    pub fn output_grid(&self) -> &CoordGrid {
        &self.fine
    }

    fn record_error(&self, message: impl Into<String>) -> VidflowError {
        VidflowError::Record {
            index: self.next,
            message: message.into(),
        }
    }

    /// Decodes the next frame. Pixels are clamped to `[0, 1]`.
    pub fn push(&mut self, record: &FrameRecord) -> Result<ImageTensor, VidflowError> {
        if self.next >= self.header.frame_count as usize {
            return Err(self.record_error("more records than the header announces"));
        }
        if record.is_intra() != self.header.is_intra(self.next) {
            return Err(self.record_error("frame type does not match the GoP structure"));
        }
        let (h, w) = (usize::from(self.header.height), usize::from(self.header.width));
        let values = match record {
            FrameRecord::Intra { base } => {
                let net = Network::from_quantized(&self.header.base, base)
                    .map_err(|e| self.record_error(e.to_string()))?;
                let v = net.forward_points(self.grid.coords(), self.lattice, false)?;
                self.base = Some(net);
                self.acc = Some(FlowAccumulator::zeros(self.grid.height(), self.grid.width()));
                v
            }
            FrameRecord::Predicted { flow, residual } => {
                let flow = Network::from_quantized(&self.header.flow, flow)
                    .map_err(|e| self.record_error(e.to_string()))?;
                let residual = residual
                    .as_ref()
                    .map(|r| Network::from_quantized(&self.header.residual, r))
                    .transpose()
                    .map_err(|e| self.record_error(e.to_string()))?;
                let base = self.base.as_ref().expect("I-frame decoded first");
                let acc = self.acc.as_ref().expect("I-frame decoded first");
                let v = eval_pframe(base, acc, &flow, residual.as_ref(), h, w)?;
                self.acc = Some(accumulate_flow(acc, &flow, &self.grid)?);
                v
            }
        };
        self.next += 1;
        Ok(ImageTensor::from_clamped(h, w, values.view()))
    }
}

/// Decodes a whole document.
pub fn decode_document(doc: &Document) -> Result<Vec<ImageTensor>, VidflowError> {
    let mut dec = Decoder::new(doc.header.clone())?;
    doc.frames.iter().map(|f| dec.push(f)).collect()
}

/// Decodes frames straight from bytes, reading each record only when its
/// frame is due. `sink` receives every frame as soon as it is decoded.
pub fn decode_stream(
    bytes: &[u8],
    mut sink: impl FnMut(usize, ImageTensor) -> Result<(), VidflowError>,
) -> Result<Header, VidflowError> {
    let mut reader = crate::bitstream::FrameReader::new(bytes)?;
    let mut dec = Decoder::new(reader.header().clone())?;
    while let Some(record) = reader.next_frame()? {
        let index = dec.position();
        sink(index, dec.push(&record)?)?;
    }
    Ok(dec.header)
}

/// Per-frame encoder metrics.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FrameMetrics {
    pub frame: usize,
    #[serde(rename = "type")]
    pub kind: char,
    /// Bytes of the frame record times eight.
    pub bits: u64,
    pub psnr: f64,
    pub residual: bool,
}

/// Rate-distortion losses of the two residual branches of a GoP.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ResidualChoice {
    pub rd_with: f64,
    pub rd_without: f64,
    pub include: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GopReport {
    pub index: usize,
    pub first_frame: usize,
    pub frames: usize,
    pub residual: bool,
    /// Loss of the coded P-frames (`None` for single-frame GoPs).
    pub rd_loss: Option<f64>,
    /// Both branches, when the residual was decided automatically.
    pub choice: Option<ResidualChoice>,
}

/// What a GoP leaves behind for the next one.
#[derive(Clone, Debug)]
pub struct GopState {
    /// The trained I-frame network, with its quantizers.
    pub base_net: Network,
    pub accumulator: FlowAccumulator,
    pub frame_records: Vec<FrameRecord>,
}

#[derive(Clone, Debug)]
pub struct EncodeOutput {
    pub document: Document,
    /// Exactly what a decoder produces from `document`.
    pub reconstructions: Vec<ImageTensor>,
    pub frames: Vec<FrameMetrics>,
    pub gops: Vec<GopReport>,
}

impl EncodeOutput {
    pub fn total_bytes(&self) -> usize {
        Accounting::of(&self.document).total_bytes()
    }

    pub fn bpp(&self) -> f64 {
        let h = &self.document.header;
        8.0 * self.total_bytes() as f64
            / (f64::from(h.width) * f64::from(h.height) * f64::from(h.frame_count))
    }

    pub fn mean_psnr(&self) -> f64 {
        self.frames.iter().map(|f| f.psnr).sum::<f64>() / self.frames.len().max(1) as f64
    }

    pub fn write_frame_csv<W: Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        for f in &self.frames {
            w.serialize(f)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Sine layers then a zeroed output layer: starts as the zero function.
fn init_side_network(spec: &ArchitectureSpec, seed: u64) -> Result<Network, VidflowError> {
    let mut net = Network::init(spec, seed)?;
    if let Some(last) = net.layers_mut().last_mut() {
        last.weight.fill(0.0);
    }
    Ok(net)
}

/// The frozen context a P-frame is trained against.
struct PFrameProblem<'a> {
    base: &'a Network,
    acc: &'a FlowAccumulator,
    grid: &'a CoordGrid,
    lattice: Option<Lattice>,
    fine: &'a CoordGrid,
    target: Array2<f64>,
}

/// Which networks a step differentiates.
#[derive(Clone, Copy)]
struct Trainable {
    flow: bool,
    residual: bool,
}

impl PFrameProblem<'_> {
    /// Distortion and gradients for the trainable networks, in the order
    /// flow, residual.
    fn step(
        &self,
        flow: &Network,
        residual: Option<&Network>,
        trainable: Trainable,
        quantized: bool,
        sample: Option<&[usize]>,
    ) -> Result<StepEval, TrainError> {
        let fq = quantized && flow.has_quantizers();
        let (d, flow_cache) = if trainable.flow {
            let (d, c) = flow.forward_cached(self.grid.coords(), None, fq)?;
            (d, Some(c))
        } else {
            (flow.forward_points(self.grid.coords(), None, fq)?, None)
        };
        let points = &self.grid.coords() + &self.acc.delta + &d;
        let (mut pred, base_cache) = self.base.forward_cached(points.view(), self.lattice, false)?;
        let mut res_cache = None;
        if let Some(r) = residual {
            let rq = quantized && r.has_quantizers();
            let (v, c) = r.forward_cached(self.fine.coords(), None, rq)?;
            pred += &v;
            res_cache = Some(c);
        }
        if pred.dim() != self.target.dim() {
            return Err(TrainError::ShapeMismatch("P-frame prediction".into()));
        }
        let (dist, g) = mse_and_grad(&pred, &self.target, sample, self.target.ncols());
        let mut grads = Vec::new();
        if let Some(fc) = flow_cache {
            let through_base = self.base.backward(&base_cache, g.view(), false)?;
            grads.push(flow.backward(&fc, through_base.inputs.view(), true)?.layers);
        }
        if trainable.residual {
            let (r, rc) = residual.zip(res_cache.as_ref()).expect("residual present");
            grads.push(r.backward(rc, g.view(), true)?.layers);
        }
        Ok(StepEval {
            distortion: dist,
            grads,
        })
    }
}

/// Trains the flow (and residual) of one P-frame. Returns the trained
/// networks with quantizers attached.
fn train_pframe(
    problem: &PFrameProblem<'_>,
    cfg: &CodecConfig,
    prev_flow: Option<&Network>,
    with_residual: bool,
    salt: u64,
) -> Result<(Network, Option<Network>), VidflowError> {
    let rows = problem.target.nrows();
    let first = prev_flow.is_none();
    let mut flow = match prev_flow {
        Some(f) => f.clone(),
        None => init_side_network(&cfg.flow, cfg.seed.wrapping_add(salt))?,
    };
    let mut residual = with_residual
        .then(|| init_side_network(&cfg.residual, cfg.seed.wrapping_add(salt + 1)))
        .transpose()?;

    // Full-precision stage: the first flow of a GoP trains (jointly with
    // the residual); later flows keep their state and only a new residual
    // is pretrained against them.
    if first {
        let sched = cfg.schedule("initial-flow", salt)?;
        let both = Trainable {
            flow: true,
            residual: residual.is_some(),
        };
        let mut nets: Vec<Network> = std::iter::once(flow).chain(residual).collect();
        optimize(&mut nets, &sched, false, rows, |n, s| {
            problem.step(&n[0], n.get(1), both, false, s)
        })?;
        let mut it = nets.into_iter();
        flow = it.next().expect("flow");
        residual = it.next();
    } else if let Some(r) = residual.take() {
        let sched = cfg.schedule("residual-training", salt)?;
        let only = Trainable {
            flow: false,
            residual: true,
        };
        let mut nets = [r];
        optimize(&mut nets, &sched, false, rows, |n, s| {
            problem.step(&flow, Some(&n[0]), only, true, s)
        })?;
        let [r] = nets;
        residual = Some(r);
    }

    if !flow.has_quantizers() {
        flow.attach_quantizers()?;
    }
    if let Some(r) = residual.as_mut() {
        r.attach_quantizers()?;
    }
    let stage = if first { "initial-flow-quant" } else { "other-flow-quant" };
    let sched = cfg.schedule(stage, salt)?;
    let both = Trainable {
        flow: true,
        residual: residual.is_some(),
    };
    let mut nets: Vec<Network> = std::iter::once(flow).chain(residual).collect();
    optimize(&mut nets, &sched, true, rows, |n, s| {
        problem.step(&n[0], n.get(1), both, true, s)
    })?;
    let mut it = nets.into_iter();
    Ok((it.next().expect("flow"), it.next()))
}

/// Codes the P-frames of a GoP with or without residuals, starting from
/// `decoder` right after the I-frame.
struct BranchResult {
    records: Vec<FrameRecord>,
    pictures: Vec<ImageTensor>,
    decoder: Decoder,
    rd_loss: f64,
}

fn encode_pframes(
    frames: &[ImageTensor],
    first_index: usize,
    cfg: &CodecConfig,
    mut decoder: Decoder,
    with_residual: bool,
) -> Result<BranchResult, VidflowError> {
    let mut prev_flow: Option<Network> = None;
    let mut records = Vec::new();
    let mut pictures = Vec::new();
    let mut payload_bits = 0u64;
    let mut distortion = 0.0;
    for (k, frame) in frames.iter().enumerate() {
        let index = first_index + k;
        let (flow, residual) = {
            let (grid, lattice) = decoder.base_grid();
            let problem = PFrameProblem {
                base: decoder.base().expect("I-frame decoded"),
                acc: decoder.accumulator().expect("I-frame decoded"),
                grid,
                lattice,
                fine: decoder.output_grid(),
                target: frame.to_rows(),
            };
            let salt = 1000 * index as u64 + if with_residual { 500 } else { 0 };
            train_pframe(&problem, cfg, prev_flow.as_ref(), with_residual, salt)?
        };
        let record = FrameRecord::Predicted {
            flow: flow.export_quantized()?,
            residual: residual.as_ref().map(Network::export_quantized).transpose()?,
        };
        let picture = decoder.push(&record)?;
        distortion += mse(&picture, frame)?;
        if let FrameRecord::Predicted { flow: f, residual: r } = &record {
            payload_bits += f
                .iter()
                .chain(r.iter().flatten())
                .map(QuantizedTensor::payload_bits)
                .sum::<u64>();
        }
        log::info!("frame {index}: P-frame PSNR {:.2} dB", psnr_from_mse(mse(&picture, frame)?));
        records.push(record);
        pictures.push(picture);
        prev_flow = Some(flow);
    }
    let n = frames.len().max(1) as f64;
    // The rate is normalized by the flow parameter count of every branch,
    // so both branches are measured in the same unit.
    let rate = payload_bits as f64 / (cfg.flow.param_count() as f64 * n);
    Ok(BranchResult {
        records,
        pictures,
        decoder,
        rd_loss: distortion / n + cfg.beta * rate,
    })
}

/// Codes one GoP. `decoder` must be positioned at the GoP's first frame;
/// it is advanced past the GoP. `prev` initializes the I-frame network.
pub fn encode_gop(
    frames: &[ImageTensor],
    cfg: &CodecConfig,
    decoder: &mut Decoder,
    prev: Option<&GopState>,
) -> Result<(GopState, Vec<ImageTensor>, GopReport), VidflowError> {
    let first_index = decoder.position();
    if frames.is_empty() {
        return Err(VidflowError::NoFrames);
    }
    if frames.len() > cfg.gop_size {
        return Err(VidflowError::InvalidConfig(format!(
            "{} frames in a GoP of size {}",
            frames.len(),
            cfg.gop_size
        )));
    }
    let image_mode = decoder.header().frame_count == 1;
    let pre_stage = match (image_mode, prev) {
        (true, _) => "image-pretrain",
        (false, None) => "initial-iframe",
        (false, Some(_)) => "other-iframe",
    };
    let salt = 1000 * first_index as u64;
    let pretrain = cfg.schedule(pre_stage, salt)?;
    let qat = cfg.schedule("image-qat", salt)?;
    let init = match prev {
        Some(p) => {
            let mut n = p.base_net.clone();
            n.clear_quantizers();
            n
        }
        None => Network::init(&cfg.base, pretrain.seed)?,
    };
    let target = FitTarget::image(&frames[0], &cfg.base)?;
    let trained = train_fit(&target, init, Some(&pretrain), Some(&qat))?;
    let iframe = FrameRecord::Intra {
        base: trained.network.export_quantized()?,
    };
    let mut pictures = vec![decoder.push(&iframe)?];
    log::info!(
        "frame {first_index}: I-frame PSNR {:.2} dB, {:.2} bits/param",
        psnr_from_mse(mse(&pictures[0], &frames[0])?),
        trained.mean_bits
    );
    let mut records = vec![iframe];

    let rest = &frames[1..];
    let mut report = GopReport {
        index: first_index / cfg.gop_size,
        first_frame: first_index,
        frames: frames.len(),
        residual: false,
        rd_loss: None,
        choice: None,
    };
    if !rest.is_empty() {
        let run = |with| encode_pframes(rest, first_index + 1, cfg, decoder.clone(), with);
        let chosen = match cfg.residual_mode {
            ResidualMode::Always => run(true)?,
            ResidualMode::Never => run(false)?,
            ResidualMode::Auto => {
                let with = run(true)?;
                let without = run(false)?;
                let include = residual_decision(with.rd_loss, without.rd_loss)?;
                log::info!(
                    "GoP {}: RD with residual {:.4e}, without {:.4e}; residual {}",
                    report.index,
                    with.rd_loss,
                    without.rd_loss,
                    if include { "included" } else { "dropped" }
                );
                report.choice = Some(ResidualChoice {
                    rd_with: with.rd_loss,
                    rd_without: without.rd_loss,
                    include,
                });
                if include {
                    with
                } else {
                    without
                }
            }
        };
        report.residual = matches!(
            chosen.records.first(),
            Some(FrameRecord::Predicted { residual: Some(_), .. })
        );
        report.rd_loss = Some(chosen.rd_loss);
        records.extend(chosen.records);
        pictures.extend(chosen.pictures);
        *decoder = chosen.decoder;
    }
    let state = GopState {
        base_net: trained.network,
        accumulator: decoder
            .accumulator()
            .cloned()
            .expect("accumulator after an I-frame"),
        frame_records: records,
    };
    Ok((state, pictures, report))
}

fn check_frames(frames: &[ImageTensor]) -> Result<(), VidflowError> {
    let first = frames.first().ok_or(VidflowError::NoFrames)?;
    for (index, f) in frames.iter().enumerate() {
        if f.shape() != first.shape() || f.channels() != 3 {
            return Err(VidflowError::FrameShape {
                index,
                expected: (first.height(), first.width(), 3),
                found: f.shape(),
            });
        }
    }
    Ok(())
}

/// Encodes a frame sequence; a single frame is coded as an image.
pub fn encode_video(frames: &[ImageTensor], cfg: &CodecConfig) -> Result<EncodeOutput, VidflowError> {
    cfg.validate()?;
    check_frames(frames)?;
    let header = cfg.header(frames[0].width(), frames[0].height(), frames.len())?;
    let mut decoder = Decoder::new(header.clone())?;
    let mut state: Option<GopState> = None;
    let mut records = Vec::with_capacity(frames.len());
    let mut pictures = Vec::with_capacity(frames.len());
    let mut gops = Vec::new();
    for chunk in frames.chunks(cfg.gop_size) {
        let (s, p, report) = encode_gop(chunk, cfg, &mut decoder, state.as_ref())?;
        records.extend(s.frame_records.iter().cloned());
        pictures.extend(p);
        gops.push(report);
        state = Some(s);
    }
    let document = Document {
        header,
        frames: records,
    };
    let acc = Accounting::of(&document);
    let metrics = acc
        .frames
        .iter()
        .zip(pictures.iter().zip(frames))
        .map(|(a, (p, f))| {
            Ok(FrameMetrics {
                frame: a.index,
                kind: if a.intra { 'I' } else { 'P' },
                bits: 8 * a.total_bytes() as u64,
                psnr: psnr_from_mse(mse(p, f)?),
                residual: a.residual,
            })
        })
        .collect::<Result<Vec<_>, VidflowError>>()?;
    Ok(EncodeOutput {
        document,
        reconstructions: pictures,
        frames: metrics,
        gops,
    })
}
