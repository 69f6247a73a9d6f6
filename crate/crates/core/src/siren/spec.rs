use std::fmt;
use std::str::FromStr;

use super::SirenError;

/// Frequency scale applied inside every sine layer.
pub const DEFAULT_OMEGA0: f32 = 30.0;

/// Activation of a learnable per-pixel layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LayerKind {
    /// `sin(omega0 * (W x + b))`, written `S`.
    Sine,
    /// `max(W x + b, 0)`, written `C`.
    Relu,
    /// `W x + b`, written `L`. Used as the output of flow and residual
    /// networks, whose outputs must be able to go negative.
    Linear,
}

/// One entry of a layer string.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Op {
    Learnable(LayerKind),
    /// Bilinear upsampling, written `U`.
    Upsample,
}

impl Op {
    fn symbol(self) -> char {
        match self {
            Op::Learnable(LayerKind::Sine) => 'S',
            Op::Learnable(LayerKind::Relu) => 'C',
            Op::Learnable(LayerKind::Linear) => 'L',
            Op::Upsample => 'U',
        }
    }
}

/// Everything needed to build a network and count its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchitectureSpec {
    ops: Vec<Op>,
    pub channels: usize,
    pub in_dim: usize,
    pub out_dim: usize,
    pub omega0: f32,
    pub upsample_factor: usize,
}

fn parse_ops(layers: &str) -> Result<Vec<Op>, SirenError> {
    let bad = |why| SirenError::InvalidLayerString(layers.to_string(), why);
    let ops = layers
        .chars()
        .filter(|c| *c != '-')
        .map(|c| match c {
            'S' => Ok(Op::Learnable(LayerKind::Sine)),
            'C' => Ok(Op::Learnable(LayerKind::Relu)),
            'L' => Ok(Op::Learnable(LayerKind::Linear)),
            'U' => Ok(Op::Upsample),
            _ => Err(bad("unknown symbol (expected S, U, C or L)")),
        })
        .collect::<Result<Vec<_>, _>>()?;
    if ops.is_empty() {
        return Err(bad("empty"));
    }
    if ops.iter().filter(|op| **op == Op::Upsample).count() > 1 {
        return Err(bad("at most one U"));
    }
    if ops[0] == Op::Upsample || ops[ops.len() - 1] == Op::Upsample {
        return Err(bad("U cannot be first or last"));
    }
    Ok(ops)
}

impl ArchitectureSpec {
    /// Builds and validates a spec with `omega0 = 30` and upsample factor 2.
    pub fn new(
        layers: &str,
        channels: usize,
        in_dim: usize,
        out_dim: usize,
    ) -> Result<Self, SirenError> {
        let spec = ArchitectureSpec {
            ops: parse_ops(layers)?,
            channels,
            in_dim,
            out_dim,
            omega0: DEFAULT_OMEGA0,
            upsample_factor: 2,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_omega0(mut self, omega0: f32) -> Result<Self, SirenError> {
        self.omega0 = omega0;
        self.validate()?;
        Ok(self)
    }

    pub fn with_upsample_factor(mut self, factor: usize) -> Result<Self, SirenError> {
        self.upsample_factor = factor;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), SirenError> {
        let invalid = |msg: String| Err(SirenError::InvalidSpec(msg));
        if !(2..=3).contains(&self.in_dim) {
            return invalid(format!("in_dim must be 2 or 3, got {}", self.in_dim));
        }
        if !(2..=3).contains(&self.out_dim) {
            return invalid(format!("out_dim must be 2 or 3, got {}", self.out_dim));
        }
        if self.channels == 0 || self.channels > u16::MAX as usize {
            return invalid(format!("channels out of range: {}", self.channels));
        }
        if !(self.omega0.is_finite() && self.omega0 > 0.0) {
            return invalid(format!("omega0 must be positive, got {}", self.omega0));
        }
        if self.upsample_factor == 0 || self.upsample_factor > u8::MAX as usize {
            return invalid(format!("bad upsample factor {}", self.upsample_factor));
        }
        if self.has_upsample() && self.in_dim != 2 {
            return invalid("upsampling requires 2-D inputs".into());
        }
        // Re-run the string checks for specs built field by field.
        parse_ops(&self.layer_string())?;
        Ok(())
    }

    /// A plain SIREN: `layers - 1` sine layers and a ReLU output layer.
    pub fn siren(layers: usize, channels: usize) -> Result<Self, SirenError> {
        if layers == 0 {
            return Err(SirenError::InvalidSpec("zero layers".into()));
        }
        Self::new(&format!("{}C", "S".repeat(layers - 1)), channels, 2, 3)
    }

    /// A SIREN with one bilinear upsampling step ahead of the last sine
    /// layer: `layers - 2` sine layers, `U`, one sine layer and a ReLU
    /// output layer.
    pub fn usiren(layers: usize, channels: usize) -> Result<Self, SirenError> {
        if layers < 3 {
            return Err(SirenError::InvalidSpec("uSIREN needs at least 3 layers".into()));
        }
        Self::new(&format!("{}USC", "S".repeat(layers - 2)), channels, 2, 3)
    }

    /// A space-time SIREN taking `(x, y, t)`.
    pub fn siren3d(layers: usize, channels: usize) -> Result<Self, SirenError> {
        if layers == 0 {
            return Err(SirenError::InvalidSpec("zero layers".into()));
        }
        Self::new(&format!("{}C", "S".repeat(layers - 1)), channels, 3, 3)
    }

    /// Sine layers with a linear 2-D output, for displacement fields.
    pub fn flow(layers: usize, channels: usize) -> Result<Self, SirenError> {
        if layers == 0 {
            return Err(SirenError::InvalidSpec("zero layers".into()));
        }
        Self::new(&format!("{}L", "S".repeat(layers - 1)), channels, 2, 2)
    }

    /// Sine layers with a linear RGB output, for pixel-space residuals.
    pub fn residual(layers: usize, channels: usize) -> Result<Self, SirenError> {
        if layers == 0 {
            return Err(SirenError::InvalidSpec("zero layers".into()));
        }
        Self::new(&format!("{}L", "S".repeat(layers - 1)), channels, 2, 3)
    }

    pub fn ops(&self) -> &[Op] {
        &self.ops
    }

    pub fn layer_string(&self) -> String {
        self.ops.iter().map(|op| op.symbol()).collect()
    }

    pub fn has_upsample(&self) -> bool {
        self.ops.contains(&Op::Upsample)
    }

    /// Number of learnable layers before the upsampling step, if any.
    pub fn upsample_position(&self) -> Option<usize> {
        let idx = self.ops.iter().position(|op| *op == Op::Upsample)?;
        Some(self.ops[..idx].iter().filter(|op| **op != Op::Upsample).count())
    }

    pub fn learnable_layers(&self) -> Vec<LayerKind> {
        self.ops
            .iter()
            .filter_map(|op| match op {
                Op::Learnable(kind) => Some(*kind),
                Op::Upsample => None,
            })
            .collect()
    }

    pub fn num_layers(&self) -> usize {
        self.learnable_layers().len()
    }

    /// `(fan_in, fan_out)` of every learnable layer.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let n = self.num_layers();
        (0..n)
            .map(|i| {
                let fan_in = if i == 0 { self.in_dim } else { self.channels };
                let fan_out = if i + 1 == n { self.out_dim } else { self.channels };
                (fan_in, fan_out)
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes()
            .iter()
            .map(|(fan_in, fan_out)| fan_in * fan_out + fan_out)
            .sum()
    }
}

/// Total number of weights and biases described by `spec`.
pub fn param_count(spec: &ArchitectureSpec) -> usize {
    spec.param_count()
}

impl fmt::Display for ArchitectureSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} channels={} in={} out={} omega0={} upsample={}",
            self.layer_string(),
            self.channels,
            self.in_dim,
            self.out_dim,
            self.omega0,
            self.upsample_factor
        )
    }
}

impl FromStr for ArchitectureSpec {
    type Err = SirenError;

    /// Parses the [`Display`](fmt::Display) form. Missing keys take the
    /// defaults of [`ArchitectureSpec::new`] (`in=2 out=3`).
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut parts = s.split_whitespace();
        let layers = parts
            .next()
            .ok_or_else(|| SirenError::InvalidSpec("empty spec".into()))?;
        let mut spec = ArchitectureSpec {
            ops: parse_ops(layers)?,
            channels: 0,
            in_dim: 2,
            out_dim: 3,
            omega0: DEFAULT_OMEGA0,
            upsample_factor: 2,
        };
        for part in parts {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| SirenError::InvalidSpec(format!("expected key=value: {part}")))?;
            let int = || {
                value
                    .parse::<usize>()
                    .map_err(|_| SirenError::InvalidSpec(format!("bad integer for {key}: {value}")))
            };
            match key {
                "channels" => spec.channels = int()?,
                "in" => spec.in_dim = int()?,
                "out" => spec.out_dim = int()?,
                "upsample" => spec.upsample_factor = int()?,
                "omega0" => {
                    spec.omega0 = value
                        .parse()
                        .map_err(|_| SirenError::InvalidSpec(format!("bad omega0: {value}")))?
                }
                _ => return Err(SirenError::InvalidSpec(format!("unknown key {key}"))),
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_grouped_layer_strings() {
        let s = ArchitectureSpec::new("SSS-SSS-SSS-SSC", 50, 2, 3).unwrap();
        assert_eq!(s.num_layers(), 12);
        assert_eq!(s.param_count(), 25803);
        let u = ArchitectureSpec::new("SSS-SSS-SSS-SUS-C", 47, 2, 3).unwrap();
        assert_eq!(u.num_layers(), 12);
        assert_eq!(u.upsample_position(), Some(10));
        assert_eq!(u.param_count(), 22845);
    }

    #[test]
    fn param_counts() {
        assert_eq!(ArchitectureSpec::siren(5, 20).unwrap().param_count(), 1383);
        assert_eq!(ArchitectureSpec::siren(10, 28).unwrap().param_count(), 6667);
        assert_eq!(ArchitectureSpec::siren(12, 50).unwrap().param_count(), 25803);
        assert_eq!(ArchitectureSpec::siren(13, 49).unwrap().param_count(), 27247);
        assert_eq!(ArchitectureSpec::usiren(13, 47).unwrap().param_count(), 25101);
        assert_eq!(ArchitectureSpec::siren3d(14, 45).unwrap().param_count(), 25158);
        assert_eq!(ArchitectureSpec::flow(6, 32).unwrap().param_count(), 4386);
    }

    #[test]
    fn rejects_bad_strings() {
        for bad in ["", "SSX", "USC", "SSU", "SUSUS", "---"] {
            assert!(ArchitectureSpec::new(bad, 8, 2, 3).is_err(), "{bad}");
        }
        assert!(ArchitectureSpec::new("SC", 8, 4, 3).is_err());
        assert!(ArchitectureSpec::new("SC", 8, 2, 1).is_err());
        assert!(ArchitectureSpec::new("SC", 0, 2, 3).is_err());
        assert!(ArchitectureSpec::new("SUSC", 8, 3, 3).is_err());
    }

    #[test]
    fn single_layer_shapes() {
        let s = ArchitectureSpec::new("L", 16, 2, 3).unwrap();
        assert_eq!(s.layer_shapes(), vec![(2, 3)]);
        assert_eq!(s.param_count(), 9);
    }

    #[test]
    fn text_form_round_trips() {
        let s = ArchitectureSpec::usiren(6, 12)
            .unwrap()
            .with_omega0(25.5)
            .unwrap()
            .with_upsample_factor(4)
            .unwrap();
        let text = s.to_string();
        assert_eq!(text, "SSSSUSC channels=12 in=2 out=3 omega0=25.5 upsample=4");
        assert_eq!(text.parse::<ArchitectureSpec>().unwrap(), s);
        assert!("SSC channels=x".parse::<ArchitectureSpec>().is_err());
        assert!("SSC channels=4 foo=1".parse::<ArchitectureSpec>().is_err());
    }

    proptest::proptest! {
        #[test]
        fn param_count_matches_closed_form(layers in 2usize..16, channels in 1usize..128, in_dim in 2usize..4) {
            let spec = if in_dim == 3 {
                ArchitectureSpec::siren3d(layers, channels).unwrap()
            } else {
                ArchitectureSpec::siren(layers, channels).unwrap()
            };
            let (c, d) = (channels, in_dim);
            let expected = (d * c + c) + (layers - 2) * (c * c + c) + (c * 3 + 3);
            proptest::prop_assert_eq!(spec.param_count(), expected);
            let net = crate::siren::Network::init(&spec, 1).unwrap();
            proptest::prop_assert_eq!(net.params_flat().len(), expected);
        }
    }
}
