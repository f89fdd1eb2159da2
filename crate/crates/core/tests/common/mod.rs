//! Helpers shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

use cmpfcn::autodiff::{Tape, Tensor4, Var};
use cmpfcn::layout::{Rect, RectLayout};
use cmpfcn::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, dims: [usize; 4]) -> Tensor4<f64> {
    let n = dims.iter().product();
    Tensor4::new(dims, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Largest relative gap between backward and central differences.
#[derive(Debug, Clone, Copy, Default)]
pub struct GradReport {
    pub max_rel: f64,
    pub checked: usize,
}

impl GradReport {
    pub fn merge(self, other: GradReport) -> GradReport {
        GradReport { max_rel: self.max_rel.max(other.max_rel), checked: self.checked + other.checked }
    }
}

/// `|a - n| / max(|a|, |n|, floor)`: relative except for near-zero entries,
/// where finite differences carry only absolute accuracy.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

fn scalar_loss<F>(build: &F, leaves: &[Tensor4<f64>]) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.constant(t.clone())).collect();
    let loss = build(&mut tape, &vars).unwrap();
    tape.value(loss).data()[0]
}

/// Compare the tape gradient of a scalar loss against central differences at
/// the chosen `(leaf, element)` coordinates, or at every coordinate if `None`.
pub fn gradcheck<F>(build: F, leaves: &[Tensor4<f64>], coords: Option<&[(usize, usize)]>) -> GradReport
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &vars).unwrap();
    tape.backward(loss).unwrap();
    let grads: Vec<Tensor4<f64>> = vars.iter().map(|&v| tape.grad(v).unwrap().clone()).collect();

    let all: Vec<(usize, usize)>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = leaves.iter().enumerate().flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j))).collect();
            &all
        }
    };
    let mut report = GradReport::default();
    let mut work = leaves.to_vec();
    for &(i, j) in coords {
        let orig = work[i].data()[j];
        work[i].data_mut()[j] = orig + FD_STEP;
        let plus = scalar_loss(&build, &work);
        work[i].data_mut()[j] = orig - FD_STEP;
        let minus = scalar_loss(&build, &work);
        work[i].data_mut()[j] = orig;
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        report.max_rel = report.max_rel.max(rel_err(grads[i].data()[j], numeric));
        report.checked += 1;
    }
    report
}

/// A die of `size`×`size` nm covered by `count` random rectangles of 4 to `max_side` nm.
pub fn random_layout(seed: u64, size: i64, count: usize, max_side: i64) -> RectLayout {
    let mut rng = rng(seed);
    let rects = (0..count)
        .map(|_| {
            let w = rng.gen_range(4..max_side);
            let h = rng.gen_range(4..max_side);
            let x0 = rng.gen_range(0..size - w);
            let y0 = rng.gen_range(0..size - h);
            Rect { x0, y0, x1: x0 + w, y1: y0 + h }
        })
        .collect();
    RectLayout::new(size, size, rects).unwrap()
}

pub const OP_SHAPES: usize = 20;

fn mse_against(tape: &mut Tape<f64>, y: Var, target: &Tensor4<f64>) -> Result<Var> {
    let t = tape.constant(target.clone());
    tape.mse_loss(y, t)
}

/// Values at least `gap` apart inside every 2×2 pooling window, so a step of
/// `FD_STEP` never changes the argmax.
fn pool_safe(rng: &mut ChaCha8Rng, dims: [usize; 4], gap: f64) -> Tensor4<f64> {
    loop {
        let t = random_tensor(rng, dims);
        let [n, c, h, w] = dims;
        let ok = (0..n * c).all(|p| {
            let plane = &t.data()[p * h * w..(p + 1) * h * w];
            (0..h / 2).all(|i| {
                (0..w / 2).all(|j| {
                    let v = [
                        plane[2 * i * w + 2 * j],
                        plane[2 * i * w + 2 * j + 1],
                        plane[(2 * i + 1) * w + 2 * j],
                        plane[(2 * i + 1) * w + 2 * j + 1],
                    ];
                    (0..4).all(|a| (a + 1..4).all(|b| (v[a] - v[b]).abs() > gap))
                })
            })
        });
        if ok {
            return t;
        }
    }
}

/// Every differentiable operation, each on `OP_SHAPES` random shapes.
pub fn op_suites(seed: u64) -> Vec<(&'static str, GradReport)> {
    use cmpfcn::autodiff::Padding;
    let mut rng = rng(seed);
    let mut out = Vec::new();

    for (name, padding) in [("conv2d/zero", Padding::Zero), ("conv2d/replicate", Padding::Replicate)] {
        let mut rep = GradReport::default();
        for _ in 0..OP_SHAPES {
            let (n, cin, cout) = (rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(1..=3));
            let (h, w) = (rng.gen_range(3..=6), rng.gen_range(3..=6));
            let k = [1, 3, 5][rng.gen_range(0..3)];
            let x = random_tensor(&mut rng, [n, cin, h, w]);
            let wt = random_tensor(&mut rng, [cout, cin, k, k]);
            let b = random_tensor(&mut rng, [1, cout, 1, 1]);
            let target = random_tensor(&mut rng, [n, cout, h, w]);
            rep = rep.merge(gradcheck(
                |tape, v| {
                    let y = tape.conv2d(v[0], v[1], v[2], padding)?;
                    mse_against(tape, y, &target)
                },
                &[x, wt, b],
                None,
            ));
        }
        out.push((name, rep));
    }

    let mut rep = GradReport::default();
    for _ in 0..OP_SHAPES {
        let dims = [rng.gen_range(1..=2), rng.gen_range(1..=3), 2 * rng.gen_range(1..=4), 2 * rng.gen_range(1..=4)];
        let x = pool_safe(&mut rng, dims, 1e-3);
        let target = random_tensor(&mut rng, [dims[0], dims[1], dims[2] / 2, dims[3] / 2]);
        rep = rep.merge(gradcheck(
            |tape, v| {
                let y = tape.maxpool2(v[0])?;
                mse_against(tape, y, &target)
            },
            &[x],
            None,
        ));
    }
    out.push(("maxpool2", rep));

    let mut rep = GradReport::default();
    for _ in 0..OP_SHAPES {
        let dims = [rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(1..=5), rng.gen_range(1..=5)];
        let x = random_tensor(&mut rng, dims);
        let target = random_tensor(&mut rng, [dims[0], dims[1], dims[2] * 2, dims[3] * 2]);
        rep = rep.merge(gradcheck(
            |tape, v| {
                let y = tape.upsample2(v[0])?;
                mse_against(tape, y, &target)
            },
            &[x],
            None,
        ));
    }
    out.push(("upsample2", rep));

    let mut rep = GradReport::default();
    for _ in 0..OP_SHAPES {
        let (n, h, w) = (rng.gen_range(1..=2), rng.gen_range(1..=5), rng.gen_range(1..=5));
        let (ca, cb) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
        let a = random_tensor(&mut rng, [n, ca, h, w]);
        let b = random_tensor(&mut rng, [n, cb, h, w]);
        let target = random_tensor(&mut rng, [n, ca + cb, h, w]);
        rep = rep.merge(gradcheck(
            |tape, v| {
                let y = tape.concat_channels(v[0], v[1])?;
                mse_against(tape, y, &target)
            },
            &[a, b],
            None,
        ));
    }
    out.push(("concat", rep));

    for name in ["relu", "tanh"] {
        let mut rep = GradReport::default();
        for _ in 0..OP_SHAPES {
            let dims = [rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(1..=5), rng.gen_range(1..=5)];
            let mut x = random_tensor(&mut rng, dims);
            // Keep inputs off the ReLU kink.
            x.data_mut().iter_mut().filter(|v| v.abs() < 1e-3).for_each(|v| *v = if *v < 0.0 { -1e-2 } else { 1e-2 });
            let target = random_tensor(&mut rng, dims);
            rep = rep.merge(gradcheck(
                |tape, v| {
                    let y = if name == "relu" { tape.relu(v[0])? } else { tape.tanh(v[0])? };
                    mse_against(tape, y, &target)
                },
                &[x],
                None,
            ));
        }
        out.push((name, rep));
    }

    let mut rep = GradReport::default();
    for _ in 0..OP_SHAPES {
        let dims = [rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(1..=5), rng.gen_range(1..=5)];
        let p = random_tensor(&mut rng, dims);
        let t = random_tensor(&mut rng, dims);
        rep = rep.merge(gradcheck(|tape, v| tape.mse_loss(v[0], v[1]), &[p, t], None));
    }
    out.push(("mse", rep));
    out
}

pub const NET_COORDS: usize = 50;

/// Full network on a 16×16 frame at depth 2, checked at `NET_COORDS`
/// random parameter coordinates.
pub fn unet_gradcheck(seed: u64) -> GradReport {
    use cmpfcn::unet::{forward_on_tape, ModelState, UNetConfig};
    let cfg = UNetConfig { depth: 2, base_channels: 4, kernel: 3, frame_size: 16 };
    let model = ModelState::init(cfg, seed).unwrap();
    let mut rng = rng(seed ^ 0x5eed);
    let mut params = model.tensors::<f64>();
    for p in params.iter_mut().filter(|p| p.dims()[0] == 1 && p.dims()[2] == 1 && p.dims()[3] == 1) {
        p.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.1..0.1));
    }
    let input = Tensor4::new([1, 1, 16, 16], (0..256).map(|_| rng.gen_range(0..2) as f64).collect()).unwrap();
    let target = random_tensor(&mut rng, [1, 1, 16, 16]);
    let total: usize = params.iter().map(Tensor4::len).sum();
    let coords: Vec<(usize, usize)> = (0..NET_COORDS)
        .map(|_| {
            let mut k = rng.gen_range(0..total);
            let mut i = 0;
            while k >= params[i].len() {
                k -= params[i].len();
                i += 1;
            }
            (i, k)
        })
        .collect();
    gradcheck(
        |tape, v| {
            let x = tape.constant(input.clone());
            let y = forward_on_tape(tape, &cfg, v, x)?;
            mse_against(tape, y, &target)
        },
        &params,
        Some(&coords),
    )
}
