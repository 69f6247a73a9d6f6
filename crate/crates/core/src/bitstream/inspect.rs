//! Byte accounting and the human-readable `inspect` report.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::{BitWriter, Document, FrameRecord, BITWIDTH_FIELD_BITS};
use crate::quant::QuantizedTensor;
use crate::siren::ArchitectureSpec;

/// Where the bytes of one tensor record go.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorAccount {
    pub network: &'static str,
    pub layer: usize,
    pub is_bias: bool,
    pub rows: usize,
    pub row_len: usize,
    /// Row count and bitwidth fields, with their padding.
    pub field_bytes: usize,
    pub scale_bytes: usize,
    pub payload_bits: u64,
    /// Payload rounded up to a whole byte.
    pub payload_bytes: usize,
    pub bitwidths: Vec<u8>,
}

impl TensorAccount {
    fn of(network: &'static str, index: usize, qt: &QuantizedTensor) -> Self {
        let rows = qt.rows();
        let payload_bits = qt.payload_bits();
        TensorAccount {
            network,
            layer: index / 2,
            is_bias: index % 2 == 1,
            rows,
            row_len: qt.row_len(),
            field_bytes: 2 + (rows * BITWIDTH_FIELD_BITS as usize).div_ceil(8),
            scale_bytes: 4 * rows,
            payload_bits,
            payload_bytes: payload_bits.div_ceil(8) as usize,
            bitwidths: qt.bitwidths().to_vec(),
        }
    }

    pub fn params(&self) -> usize {
        self.rows * self.row_len
    }

    pub fn total_bytes(&self) -> usize {
        self.field_bytes + self.scale_bytes + self.payload_bytes
    }

    /// Mean integer bitwidth per parameter.
    pub fn mean_bits(&self) -> f64 {
        self.payload_bits as f64 / self.params() as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameAccount {
    pub index: usize,
    pub intra: bool,
    pub residual: bool,
    pub flag_bytes: usize,
    pub tensors: Vec<TensorAccount>,
}

impl FrameAccount {
    pub fn total_bytes(&self) -> usize {
        self.flag_bytes + self.tensors.iter().map(TensorAccount::total_bytes).sum::<usize>()
    }
}

/// Per-record byte budget of a document; the parts sum to the file size.
#[derive(Clone, Debug, PartialEq)]
pub struct Accounting {
    pub header_bytes: usize,
    pub frames: Vec<FrameAccount>,
}

impl Accounting {
    pub fn of(doc: &Document) -> Accounting {
        let mut w = BitWriter::new();
        let header_bytes = doc.header.write(&mut w).unwrap_or(0);
        let frames = doc
            .frames
            .iter()
            .enumerate()
            .map(|(index, f)| {
                let accounts = |name, ts: &[QuantizedTensor]| {
                    ts.iter()
                        .enumerate()
                        .map(|(i, t)| TensorAccount::of(name, i, t))
                        .collect::<Vec<_>>()
                };
                match f {
                    FrameRecord::Intra { base } => FrameAccount {
                        index,
                        intra: true,
                        residual: false,
                        flag_bytes: 0,
                        tensors: accounts("base", base),
                    },
                    FrameRecord::Predicted { flow, residual } => {
                        let mut tensors = accounts("flow", flow);
                        if let Some(r) = residual {
                            tensors.extend(accounts("residual", r));
                        }
                        FrameAccount {
                            index,
                            intra: false,
                            residual: residual.is_some(),
                            flag_bytes: 1,
                            tensors,
                        }
                    }
                }
            })
            .collect();
        Accounting {
            header_bytes,
            frames,
        }
    }

    fn tensors(&self) -> impl Iterator<Item = &TensorAccount> {
        self.frames.iter().flat_map(|f| f.tensors.iter())
    }

    pub fn total_bytes(&self) -> usize {
        self.header_bytes + self.frames.iter().map(FrameAccount::total_bytes).sum::<usize>()
    }

    pub fn payload_bits(&self) -> u64 {
        self.tensors().map(|t| t.payload_bits).sum()
    }

    pub fn params(&self) -> usize {
        self.tensors().map(TensorAccount::params).sum()
    }

    /// Mean stored bitwidth over every parameter of every network.
    pub fn mean_bits(&self) -> f64 {
        self.payload_bits() as f64 / self.params().max(1) as f64
    }

    pub fn payload_bytes(&self) -> usize {
        self.tensors().map(|t| t.payload_bytes).sum()
    }

    pub fn scale_bytes(&self) -> usize {
        self.tensors().map(|t| t.scale_bytes).sum()
    }

    /// Everything that is neither payload nor scales: header, flags, row
    /// counts, bitwidth fields and payload padding.
    pub fn overhead_bytes(&self) -> usize {
        self.total_bytes() - self.payload_bytes() - self.scale_bytes()
    }
}

fn spec_line(name: &str, s: &ArchitectureSpec) -> String {
    format!(
        "  {name:<9}{:<16} channels {:>4}  in {} out {}  omega0 {}  upsample {}  params {}",
        s.layer_string(),
        s.channels,
        s.in_dim,
        s.out_dim,
        s.omega0,
        s.upsample_factor,
        s.param_count()
    )
}

/// Text report: header fields, mean bitwidths per layer (weights and
/// biases separately), bitwidth histograms, per-frame byte budgets and
/// the overall split between payload, scales and framing.
pub fn inspect_report(doc: &Document) -> String {
    let acc = Accounting::of(doc);
    let h = &doc.header;
    let total = acc.total_bytes();
    let pixels = f64::from(h.width) * f64::from(h.height) * f64::from(h.frame_count.max(1));
    let mut out = String::new();
    let _ = writeln!(out, "IPF version {}", super::VERSION);
    let _ = writeln!(
        out,
        "frames {}  size {}x{}  gop {}",
        h.frame_count, h.width, h.height, h.gop_size
    );
    let _ = writeln!(out, "networks");
    out.push_str(&spec_line("base", &h.base));
    out.push('\n');
    out.push_str(&spec_line("flow", &h.flow));
    out.push('\n');
    out.push_str(&spec_line("residual", &h.residual));
    out.push('\n');

    // Mean bitwidth per (network, layer, weight/bias), pooled over frames.
    let mut per_layer: BTreeMap<(&str, usize, bool), (u64, usize)> = BTreeMap::new();
    let mut hist: BTreeMap<(&str, bool), BTreeMap<u8, usize>> = BTreeMap::new();
    for t in acc.tensors() {
        let e = per_layer.entry((t.network, t.layer, t.is_bias)).or_default();
        e.0 += t.payload_bits;
        e.1 += t.params();
        let hh = hist.entry((t.network, t.is_bias)).or_default();
        for &b in &t.bitwidths {
            *hh.entry(b).or_default() += t.row_len;
        }
    }
    let _ = writeln!(out, "mean bits per parameter by layer");
    let _ = writeln!(out, "  network   layer  weights  biases");
    let mut keys: Vec<(&str, usize)> = per_layer.keys().map(|k| (k.0, k.1)).collect();
    keys.dedup();
    let order = |n: &str| ["base", "flow", "residual"].iter().position(|x| *x == n);
    keys.sort_by_key(|k| (order(k.0), k.1));
    for (net, layer) in keys {
        let mean = |bias| {
            per_layer
                .get(&(net, layer, bias))
                .map_or(f64::NAN, |&(bits, n)| bits as f64 / n as f64)
        };
        let _ = writeln!(
            out,
            "  {net:<9} {layer:>5}  {:>7.2}  {:>6.2}",
            mean(false),
            mean(true)
        );
    }
    let _ = writeln!(out, "bitwidth histograms (parameters per bitwidth)");
    let mut hkeys: Vec<_> = hist.keys().copied().collect();
    hkeys.sort_by_key(|k| (order(k.0), k.1));
    for key in hkeys {
        let bins: Vec<String> = hist[&key].iter().map(|(b, n)| format!("{b}:{n}")).collect();
        let kind = if key.1 { "biases" } else { "weights" };
        let _ = writeln!(out, "  {:<9} {kind:<8} {}", key.0, bins.join(" "));
    }
    let _ = writeln!(out, "frames");
    let _ = writeln!(out, "  frame  type  residual  bytes  payload_bits");
    for f in &acc.frames {
        let bits: u64 = f.tensors.iter().map(|t| t.payload_bits).sum();
        let _ = writeln!(
            out,
            "  {:>5}  {:<4}  {:<8}  {:>5}  {:>12}",
            f.index,
            if f.intra { "I" } else { "P" },
            if f.intra { "-" } else if f.residual { "yes" } else { "no" },
            f.total_bytes(),
            bits
        );
    }
    let _ = writeln!(out, "budget");
    let _ = writeln!(out, "  header            {:>9} bytes", acc.header_bytes);
    let _ = writeln!(out, "  weight payload    {:>9} bytes", acc.payload_bytes());
    let _ = writeln!(out, "  scales            {:>9} bytes", acc.scale_bytes());
    let _ = writeln!(
        out,
        "  framing           {:>9} bytes",
        acc.overhead_bytes() - acc.header_bytes
    );
    let _ = writeln!(out, "  total             {total:>9} bytes");
    let _ = writeln!(out, "parameters {}", acc.params());
    let _ = writeln!(out, "mean bits/parameter {:.1}", acc.mean_bits());
    let _ = writeln!(out, "bpp {:.4}", 8.0 * total as f64 / pixels);
    out
}
