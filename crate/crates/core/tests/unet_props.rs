mod common;

use cmpfcn::autodiff::{Padding, Tape, Tensor4};
use cmpfcn::unet::{ModelState, UNetConfig};
use rand::Rng;

/// Independent shape oracle: `Cout·Cin·k² + Cout` summed over the layer list.
fn oracle_count(depth: usize, base: usize, k: usize) -> usize {
    let conv = |cin: usize, cout: usize, k: usize| cout * cin * k * k + cout;
    let ch = |l: usize| base * (1 << l);
    let mut total = 0;
    let mut cin = 1;
    for l in 0..depth {
        total += conv(cin, ch(l), k) + conv(ch(l), ch(l), k);
        cin = ch(l);
    }
    total += conv(cin, ch(depth), k) + conv(ch(depth), ch(depth), k);
    for l in 0..depth {
        total += conv(ch(l + 1), ch(l), k) + conv(2 * ch(l), ch(l), k) + conv(ch(l), ch(l), k);
    }
    total + conv(base, 1, 1)
}

#[test]
fn parameter_count_matches_shape_oracle() {
    assert_eq!(UNetConfig::default().param_count(), 535_505);
    assert_eq!(oracle_count(3, 16, 3), 535_505);
    for depth in 1..=4 {
        for base in [1, 2, 8] {
            for k in [1, 3, 5] {
                let cfg = UNetConfig { depth, base_channels: base, kernel: k, frame_size: 1 << depth };
                assert_eq!(cfg.param_count(), oracle_count(depth, base, k), "{cfg:?}");
            }
        }
    }
}

#[test]
fn init_spread_matches_uniform_variance() {
    let cfg = UNetConfig::default();
    let m = ModelState::init(cfg, 3).unwrap();
    let p = m.params.iter().find(|p| p.name == "enc0.conv2.weight").unwrap();
    let fan_in = (p.dims[1] * p.dims[2] * p.dims[3]) as f64;
    let b = (6.0 / fan_in).sqrt();
    let n = p.data.len() as f64;
    let mean = p.data.iter().map(|&v| v as f64).sum::<f64>() / n;
    let sd = (p.data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!((sd - b / 3f64.sqrt()).abs() < 0.1 * b / 3f64.sqrt(), "sd {sd} vs {}", b / 3f64.sqrt());
    assert!(p.data.iter().all(|&v| (v as f64).abs() <= b));
}

fn rotate180(t: &Tensor4<f32>) -> Tensor4<f32> {
    let [n, c, h, w] = t.dims();
    let mut out = t.clone();
    for p in 0..n * c {
        for i in 0..h * w {
            out.data_mut()[p * h * w + i] = t.data()[p * h * w + (h * w - 1 - i)];
        }
    }
    out
}

#[test]
fn symmetric_kernels_make_the_network_180_degree_equivariant() {
    let cfg = UNetConfig { depth: 3, base_channels: 4, kernel: 3, frame_size: 32 };
    let mut m = ModelState::init(cfg, 5).unwrap();
    let mut rng = common::rng(5);
    for p in &mut m.params {
        if p.dims.len() == 4 {
            let k2 = p.dims[2] * p.dims[3];
            for kernel in p.data.chunks_mut(k2) {
                let sym: Vec<f32> = (0..k2).map(|i| 0.5 * (kernel[i] + kernel[k2 - 1 - i])).collect();
                kernel.copy_from_slice(&sym);
            }
        } else {
            p.data.iter_mut().for_each(|v| *v = rng.gen_range(-0.1..0.1));
        }
    }
    let x = Tensor4::new([1, 1, 32, 32], (0..1024).map(|_| rng.gen_range(0..2) as f32).collect()).unwrap();
    let direct = rotate180(&m.forward(&x).unwrap());
    let rotated = m.forward(&rotate180(&x)).unwrap();
    let worst = direct.data().iter().zip(rotated.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
    assert!(worst < 1e-4, "{worst}");
}

#[test]
fn forward_is_deterministic_and_batch_independent() {
    let cfg = UNetConfig { depth: 2, base_channels: 3, kernel: 3, frame_size: 16 };
    let m = ModelState::init(cfg, 8).unwrap();
    let mut rng = common::rng(8);
    let data: Vec<f32> = (0..2 * 256).map(|_| rng.gen_range(0..2) as f32).collect();
    let both = m.forward(&Tensor4::new([2, 1, 16, 16], data.clone()).unwrap()).unwrap();
    assert_eq!(both, m.forward(&Tensor4::new([2, 1, 16, 16], data.clone()).unwrap()).unwrap());
    let second = m.forward(&Tensor4::new([1, 1, 16, 16], data[256..].to_vec()).unwrap()).unwrap();
    assert_eq!(&both.data()[256..], second.data());
}

#[test]
fn rectangular_inputs_are_accepted() {
    let cfg = UNetConfig { depth: 2, base_channels: 2, kernel: 3, frame_size: 8 };
    let m = ModelState::init(cfg, 1).unwrap();
    assert_eq!(m.forward(&Tensor4::zeros([1, 1, 8, 24])).unwrap().dims(), [1, 1, 8, 24]);
    assert!(m.forward(&Tensor4::zeros([1, 1, 8, 10])).is_err());
}

#[test]
fn convolution_is_linear() {
    let mut rng = common::rng(2);
    for padding in [Padding::Zero, Padding::Replicate] {
        let x = common::random_tensor(&mut rng, [2, 3, 5, 6]);
        let y = common::random_tensor(&mut rng, [2, 3, 5, 6]);
        let w = common::random_tensor(&mut rng, [4, 3, 3, 3]);
        let (a, b) = (0.7, -1.3);
        let mut tape = Tape::<f64>::new();
        let wv = tape.constant(w);
        let zero = tape.constant(Tensor4::zeros([1, 4, 1, 1]));
        let mut mix = x.clone();
        mix.data_mut().iter_mut().zip(y.data()).for_each(|(m, v)| *m = a * *m + b * v);
        let [xv, yv, mv] = [x, y, mix].map(|t| tape.constant(t));
        let cx = tape.conv2d(xv, wv, zero, padding).unwrap();
        let cy = tape.conv2d(yv, wv, zero, padding).unwrap();
        let cm = tape.conv2d(mv, wv, zero, padding).unwrap();
        for i in 0..tape.value(cm).len() {
            let expect = a * tape.value(cx).data()[i] + b * tape.value(cy).data()[i];
            assert!((tape.value(cm).data()[i] - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn center_of_constant_input_is_size_independent() {
    let cfg = UNetConfig { depth: 3, base_channels: 4, kernel: 3, frame_size: 32 };
    let mut m = ModelState::init(cfg, 4).unwrap();
    let mut rng = common::rng(4);
    for p in m.params.iter_mut().filter(|p| p.dims.len() == 1) {
        p.data.iter_mut().for_each(|v| *v = rng.gen_range(-0.2..0.2));
    }
    for value in [0.0, 1.0] {
        let small = m.forward(&Tensor4::full([1, 1, 32, 32], value)).unwrap();
        let large = m.forward(&Tensor4::full([1, 1, 64, 64], value)).unwrap();
        let (a, b) = (small.data()[16 * 32 + 16], large.data()[32 * 64 + 32]);
        assert!((a - b).abs() < 1e-5, "{a} vs {b}");
    }
}
