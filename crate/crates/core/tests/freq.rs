use fmnet_core::autodiff::Unary;
use fmnet_core::blocks::Frd;
use fmnet_core::fft::{fft2, ifft2};
use fmnet_core::freq::{complex_softmax, freq_transpose_attention, spectral_gate, Fwm};
use fmnet_core::nn::{seeded_rng, Init, ParamStore, NORM_EPS};
use fmnet_core::{ComplexTensor, Tape, Tensor};

const TOL: f64 = 1e-10;

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn row_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

#[test]
fn complex_softmax_hand_values() {
    let re = [0.0, 1.0, 2.0, -1.0, -1.0, -1.0, 3.0, 0.5, -2.0];
    let im = [1.0, 0.0, 0.0, 0.0, 2.0, 4.0, -3.0, -3.0, 0.0];
    let a = ComplexTensor::new(Tensor::from_vec(&[3, 3], re.to_vec()).unwrap(), Tensor::from_vec(&[3, 3], im.to_vec()).unwrap()).unwrap();
    let m = complex_softmax(&a).unwrap();
    // row 0 of the real part: e^0, e^1, e^2 over their sum
    let z = 1.0 + 1f64.exp() + 2f64.exp();
    let want = [1.0 / z, 1f64.exp() / z, 2f64.exp() / z];
    for (g, w) in m.re.data()[..3].iter().zip(want) {
        assert!((g - w).abs() < 1e-15);
    }
    // a constant row is uniform
    assert!(m.re.data()[3..6].iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
    for r in 0..3 {
        let want_re = row_softmax(&re[3 * r..3 * r + 3]);
        let want_im = row_softmax(&im[3 * r..3 * r + 3]);
        for j in 0..3 {
            assert!((m.re.data()[3 * r + j] - want_re[j]).abs() < 1e-15);
            assert!((m.im.data()[3 * r + j] - want_im[j]).abs() < 1e-15);
        }
    }
    assert!(m.max_row_sum_error() < 1e-12);
}

#[test]
fn complex_softmax_row_sums_and_real_input() {
    for (seed, c) in [(0u64, 1usize), (1, 4), (2, 16), (3, 64)] {
        let mut rng = seeded_rng(seed);
        let a = ComplexTensor::new(Tensor::uniform(&[2, c, c], -20.0, 20.0, &mut rng), Tensor::uniform(&[2, c, c], -20.0, 20.0, &mut rng)).unwrap();
        let m = complex_softmax(&a).unwrap();
        assert!(m.max_row_sum_error() < 1e-12, "C={c}");
        assert!(m.re.data().iter().chain(m.im.data()).all(|&v| (0.0..=1.0).contains(&v)));
        let real = complex_softmax(&ComplexTensor::from_real(a.re().clone())).unwrap();
        assert!(real.im.data().iter().all(|&v| (v - 1.0 / c as f64).abs() < 1e-15));
    }
    assert!(complex_softmax(&ComplexTensor::zeros(&[3, 4])).is_err());
    assert!(complex_softmax(&ComplexTensor::zeros(&[4])).is_err());
}

#[test]
fn single_channel_attention_is_scaled_magnitude() {
    let mut rng = seeded_rng(5);
    let x = Tensor::uniform(&[2, 1, 6, 5], -1.0, 1.0, &mut rng);
    let tape = Tape::new();
    let y = freq_transpose_attention(tape.constant(x.clone())).unwrap().value();
    let want = x.map(|v| std::f64::consts::SQRT_2 * v.abs());
    assert!(y.max_abs_diff(&want) < TOL);
}

/// Loop evaluation of the channel attention from the FFT module.
fn freq_attention_oracle(x: &Tensor) -> Tensor {
    let s = x.shape().to_vec();
    let (b, c, n) = (s[0], s[1], s[2] * s[3]);
    let f = fft2(&ComplexTensor::from_real(x.clone())).unwrap();
    let (fr, fi) = (f.re().data(), f.im().data());
    let mut out_re = vec![0.0; b * c * n];
    let mut out_im = vec![0.0; b * c * n];
    for bi in 0..b {
        let at = |ch: usize, p: usize| ((bi * c + ch) * n) + p;
        let mut lr = vec![0.0; c * c];
        let mut li = vec![0.0; c * c];
        for i in 0..c {
            for j in 0..c {
                for p in 0..n {
                    let (ar, ai) = (fr[at(i, p)], fi[at(i, p)]);
                    let (br, bim) = (fr[at(j, p)], fi[at(j, p)]);
                    lr[i * c + j] += ar * br - ai * bim;
                    li[i * c + j] += ar * bim + ai * br;
                }
            }
        }
        for i in 0..c {
            let sr = row_softmax(&lr[i * c..(i + 1) * c]);
            let si = row_softmax(&li[i * c..(i + 1) * c]);
            for p in 0..n {
                let (mut acc_r, mut acc_i) = (0.0, 0.0);
                for j in 0..c {
                    let (vr, vi) = (fr[at(j, p)], fi[at(j, p)]);
                    acc_r += sr[j] * vr - si[j] * vi;
                    acc_i += sr[j] * vi + si[j] * vr;
                }
                out_re[at(i, p)] = acc_r;
                out_im[at(i, p)] = acc_i;
            }
        }
    }
    let z = ComplexTensor::new(Tensor::from_vec(&s, out_re).unwrap(), Tensor::from_vec(&s, out_im).unwrap()).unwrap();
    ifft2(&z).unwrap().abs()
}

#[test]
fn multi_channel_attention_matches_loop_oracle() {
    for (seed, shape) in [(0u64, [1, 3, 4, 4]), (1, [2, 3, 5, 3]), (2, [1, 5, 8, 8])] {
        let mut rng = seeded_rng(seed);
        // small values keep the spectral logits in a well-conditioned range
        let x = Tensor::uniform(&shape, -0.1, 0.1, &mut rng);
        let tape = Tape::new();
        let y = freq_transpose_attention(tape.constant(x.clone())).unwrap().value();
        let dev = y.max_abs_diff(&freq_attention_oracle(&x));
        assert!(dev < TOL, "{shape:?}: {dev:e}");
    }
}

fn pointwise(x: &Tensor, w: &Tensor, bias: &Tensor) -> Tensor {
    let s = x.shape();
    let (b, c, n) = (s[0], s[1], s[2] * s[3]);
    let co = w.shape()[0];
    let mut out = vec![0.0; b * co * n];
    for bi in 0..b {
        for o in 0..co {
            for p in 0..n {
                let mut acc = 0.0;
                for ci in 0..c {
                    acc += w.data()[o * c + ci] * x.data()[(bi * c + ci) * n + p];
                }
                out[(bi * co + o) * n + p] = acc + bias.data()[o];
            }
        }
    }
    Tensor::from_vec(&[b, co, s[2], s[3]], out).unwrap()
}

fn batch_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Tensor {
    let s = x.shape();
    let (b, c, n) = (s[0], s[1], s[2] * s[3]);
    let mut out = x.clone();
    for ch in 0..c {
        let idx: Vec<usize> = (0..b).flat_map(|bi| (0..n).map(move |p| (bi * c + ch) * n + p)).collect();
        let mu = idx.iter().map(|&i| x.data()[i]).sum::<f64>() / idx.len() as f64;
        let var = idx.iter().map(|&i| (x.data()[i] - mu).powi(2)).sum::<f64>() / idx.len() as f64;
        for &i in &idx {
            out.data_mut()[i] = gamma.data()[ch] * (x.data()[i] - mu) / (var + NORM_EPS).sqrt() + beta.data()[ch];
        }
    }
    out
}

#[test]
fn fwm_matches_composed_oracle() {
    let mut store = ParamStore::new();
    let mut rng = seeded_rng(11);
    let fwm = Fwm::new(&mut Init::new(&mut store, &mut rng), 3).unwrap();
    // move the norm away from its identity init so it is exercised
    *store.get_mut(fwm.norm.gamma) = Tensor::uniform(&[3], 0.5, 1.5, &mut rng);
    *store.get_mut(fwm.norm.beta) = Tensor::uniform(&[3], -0.5, 0.5, &mut rng);
    let x = Tensor::uniform(&[2, 3, 6, 4], -1.0, 1.0, &mut rng);

    let spec = fft2(&ComplexTensor::from_real(x.clone())).unwrap();
    let bias = |id: Option<_>| store.get(id.expect("fwm convs carry a bias")).clone();
    let h = pointwise(&spec.abs(), store.get(fwm.conv1.weight), &bias(fwm.conv1.bias));
    let h = batch_norm(&h, store.get(fwm.norm.gamma), store.get(fwm.norm.beta)).map(|v| Unary::Gelu.apply(v));
    let w = pointwise(&h, store.get(fwm.conv2.weight), &bias(fwm.conv2.bias)).map(sigmoid);
    let gated = ComplexTensor::new(spec.re().zip_map(&w, |a, b| a * b).unwrap(), spec.im().zip_map(&w, |a, b| a * b).unwrap()).unwrap();
    let want = ifft2(&gated).unwrap().abs();

    let tape = Tape::new();
    let ctx = store.bind(&tape, false);
    let got = fwm.forward(&ctx, ctx.input(x)).unwrap().value();
    assert!(got.max_abs_diff(&want) < TOL);
}

#[test]
fn spectral_gate_unit_and_zero() {
    let mut rng = seeded_rng(4);
    let x = Tensor::uniform(&[1, 2, 5, 7], -1.0, 1.0, &mut rng);
    let tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = spectral_gate(xv, tape.constant(Tensor::ones(&[1, 2, 5, 7]))).unwrap().value();
    assert!(y.max_abs_diff(&x.map(f64::abs)) < 1e-12);
    let y = spectral_gate(xv, tape.constant(Tensor::zeros(&[1, 2, 5, 7]))).unwrap().value();
    assert_eq!(y.max_abs(), 0.0);
}

#[test]
fn reverse_attention_matches_oracle() {
    let mut rng = seeded_rng(21);
    let parts: Vec<Tensor> = (0..3).map(|_| Tensor::uniform(&[1, 4, 8, 8], -2.0, 2.0, &mut rng)).collect();
    let mut want = Tensor::zeros(&[1, 4, 8, 8]);
    for a in &parts {
        let mag = fft2(&ComplexTensor::from_real(a.clone())).unwrap().abs();
        let term = a.zip_map(&mag, |v, m| (1.0 - sigmoid(v)) + (1.0 - sigmoid(m))).unwrap();
        want = want.zip_map(&term, |p, q| p + q).unwrap();
    }
    let tape = Tape::new();
    let vars: Vec<_> = parts.iter().map(|t| tape.constant(t.clone())).collect();
    let got = Frd::reverse_attention(&vars).unwrap().value();
    assert!(got.max_abs_diff(&want) < TOL);
    assert!(Frd::reverse_attention(&[]).is_err());
}
