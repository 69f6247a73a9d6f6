#![allow(dead_code)]

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ipf::siren::{ArchitectureSpec, Lattice, Network};

pub const FD_STEP: f64 = 1e-4;
/// ReLU inputs within this many steps of zero are treated as kinks.
pub const KINK_STEPS: f64 = 10.0;

#[derive(Debug, Default)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Output entries excluded because a ReLU input crossed zero.
    pub skipped: usize,
}

pub fn random_matrix(rows: usize, cols: usize, lo: f64, hi: f64, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(lo..hi))
}

fn weighted_output(net: &Network, coords: &Array2<f64>, lattice: Option<Lattice>, w: &Array2<f64>) -> f64 {
    let out = net.forward_points(coords.view(), lattice, false).unwrap();
    (&out * w).sum()
}

/// The same network with a linear output layer, exposing the ReLU inputs.
fn linear_head(net: &Network) -> Option<Network> {
    let spec = net.spec();
    let s = spec.layer_string();
    if !s.ends_with('C') {
        return None;
    }
    let lin = ArchitectureSpec::new(&format!("{}L", &s[..s.len() - 1]), spec.channels, spec.in_dim, spec.out_dim)
        .unwrap()
        .with_omega0(spec.omega0)
        .unwrap()
        .with_upsample_factor(spec.upsample_factor)
        .unwrap();
    Some(Network::from_layers(&lin, net.layers().to_vec()).unwrap())
}

/// Output entries whose ReLU input keeps its sign over the perturbation.
fn smooth_mask(a: Option<Network>, b: Option<Network>, coords: (&Array2<f64>, &Array2<f64>), lattice: Option<Lattice>) -> Option<Array2<f64>> {
    let (a, b) = (a?, b?);
    let za = a.forward_points(coords.0.view(), lattice, false).unwrap();
    let zb = b.forward_points(coords.1.view(), lattice, false).unwrap();
    Some(ndarray::Zip::from(&za).and(&zb).map_collect(|x, y| f64::from((*x > 0.0) == (*y > 0.0))))
}

fn flat_grads(net: &Network, cache: &ipf::siren::ForwardCache, w: &Array2<f64>) -> Vec<f64> {
    net.backward(cache, w.view(), true)
        .unwrap()
        .layers
        .iter()
        .flat_map(|l| l.weight.iter().chain(l.bias.iter()).copied().collect::<Vec<_>>())
        .collect()
}

/// Central difference at `h`, Richardson-extrapolated with `h/2` so the
/// truncation error is fourth order in the step.
fn central_difference(f: impl Fn(f64) -> f64, h: f64) -> f64 {
    let d = |h: f64| (f(h) - f(-h)) / (2.0 * h);
    (4.0 * d(h / 2.0) - d(h)) / 3.0
}

fn rel_err(analytic: f64, fd: f64) -> f64 {
    let scale = analytic.abs().max(fd.abs());
    if scale < 1e-8 {
        0.0
    } else {
        (analytic - fd).abs() / scale
    }
}

/// Central-difference check of every parameter gradient of
/// `sum(forward(coords) * w)` for random `w`. Output entries at a ReLU
/// kink are dropped from the sum for that parameter.
pub fn check_param_gradients(net: &Network, coords: &Array2<f64>, lattice: Option<Lattice>, seed: u64) -> FdReport {
    let (out, cache) = net.forward_cached(coords.view(), lattice, false).unwrap();
    let w = random_matrix(out.nrows(), out.ncols(), -1.0, 1.0, seed);
    let full = flat_grads(net, &cache, &w);
    let base = net.params_flat();
    let mut report = FdReport::default();
    for k in 0..base.len() {
        let eval = |delta: f64| {
            let mut p = base.clone();
            p[k] += delta;
            let mut n = net.clone();
            n.set_params_flat(&p);
            n
        };
        let reach = KINK_STEPS * FD_STEP;
        let mask = smooth_mask(linear_head(&eval(reach)), linear_head(&eval(-reach)), (coords, coords), lattice);
        let (w, analytic) = match mask {
            Some(m) if m.iter().all(|&v| v == 1.0) => (w.clone(), full[k]),
            Some(m) => {
                report.skipped += m.iter().filter(|&&v| v == 0.0).count();
                let wm = &w * &m;
                let a = flat_grads(net, &cache, &wm)[k];
                (wm, a)
            }
            None => (w.clone(), full[k]),
        };
        let fd = central_difference(|d| weighted_output(&eval(d), coords, lattice, &w), FD_STEP);
        report.max_rel_err = report.max_rel_err.max(rel_err(analytic, fd));
        report.checked += 1;
    }
    report
}

/// Central-difference check of the input-coordinate gradients.
pub fn check_input_gradients(net: &Network, coords: &Array2<f64>, lattice: Option<Lattice>, seed: u64) -> FdReport {
    let (out, cache) = net.forward_cached(coords.view(), lattice, false).unwrap();
    let w = random_matrix(out.nrows(), out.ncols(), -1.0, 1.0, seed);
    let full = net.backward(&cache, w.view(), false).unwrap().inputs;
    let head = linear_head(net);
    let mut report = FdReport::default();
    for ((r, c), &g) in full.indexed_iter() {
        let shifted = |delta: f64| {
            let mut x = coords.clone();
            x[[r, c]] += delta;
            x
        };
        let reach = KINK_STEPS * FD_STEP;
        let mask = smooth_mask(head.clone(), head.clone(), (&shifted(reach), &shifted(-reach)), lattice);
        let (w, analytic) = match mask {
            Some(m) if m.iter().any(|&v| v == 0.0) => {
                report.skipped += m.iter().filter(|&&v| v == 0.0).count();
                let wm = &w * &m;
                let a = net.backward(&cache, wm.view(), false).unwrap().inputs[[r, c]];
                (wm, a)
            }
            _ => (w.clone(), g),
        };
        let fd = central_difference(|d| weighted_output(net, &shifted(d), lattice, &w), FD_STEP);
        report.max_rel_err = report.max_rel_err.max(rel_err(analytic, fd));
        report.checked += 1;
    }
    report
}

/// A network with nonzero biases, so bias gradients are exercised away
/// from the initialization point.
pub fn perturbed_network(spec: &ArchitectureSpec, seed: u64) -> Network {
    let mut net = Network::init(spec, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for l in net.layers_mut() {
        l.bias.mapv_inplace(|_| rng.random_range(-0.2..0.2));
    }
    net
}
