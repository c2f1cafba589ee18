use fmnet_core::blocks::{Frd, GateAct, Head, Mfm, MfmConfig, Pfae, PfaeConfig};
use fmnet_core::nn::{seeded_rng, Init, ParamStore};
use fmnet_core::{Tape, Tensor};

fn pfae(cfg: PfaeConfig, seed: u64) -> (Pfae, ParamStore) {
    let mut store = ParamStore::new();
    let mut rng = seeded_rng(seed);
    let p = Pfae::new(&mut Init::new(&mut store, &mut rng), cfg).unwrap();
    (p, store)
}

fn small_pfae(dilations: Vec<usize>) -> PfaeConfig {
    PfaeConfig {
        in_channels: 6,
        reduced_channels: 4,
        dilations,
        project_qkv: false,
    }
}

#[test]
fn pfae_zero_input_zero_output() {
    let (p, mut store) = pfae(small_pfae(vec![1, 3, 5, 7]), 0);
    let tape = Tape::new();
    let ctx = store.bind(&tape, false);
    let y = p.forward(&ctx, ctx.input(Tensor::zeros(&[2, 6, 8, 8]))).unwrap().value();
    assert_eq!(y.shape(), &[2, 4, 8, 8]);
    assert!(y.data().iter().all(|&v| v == 0.0));

    // nonzero biases make the response to a zero input nonzero
    let mut rng = seeded_rng(1);
    let ids: Vec<_> = store.ids().filter(|&id| store.name(id).ends_with(".bias")).collect();
    for id in ids {
        let s = store.get(id).shape().to_vec();
        *store.get_mut(id) = Tensor::uniform(&s, -1.0, 1.0, &mut rng);
    }
    let tape = Tape::new();
    let ctx = store.bind(&tape, false);
    let y = p.forward(&ctx, ctx.input(Tensor::zeros(&[2, 6, 8, 8]))).unwrap().value();
    assert!(y.max_abs() > 1e-3);
}

#[test]
fn pfae_shapes_and_minimum_extent() {
    let cfgs = [
        (small_pfae(vec![1]), [1, 6, 2, 2]),
        (small_pfae(vec![1, 3, 5, 7]), [2, 6, 4, 6]),
        (PfaeConfig { project_qkv: true, ..small_pfae(vec![2, 4]) }, [1, 6, 8, 8]),
    ];
    for (i, (cfg, shape)) in cfgs.into_iter().enumerate() {
        let c = cfg.reduced_channels;
        let (p, store) = pfae(cfg, i as u64);
        let tape = Tape::new();
        let ctx = store.bind(&tape, false);
        let x = Tensor::uniform(&shape, -1.0, 1.0, &mut seeded_rng(10 + i as u64));
        let y = p.forward(&ctx, ctx.input(x)).unwrap().value();
        assert_eq!(y.shape(), &[shape[0], c, shape[2], shape[3]]);
        assert!(y.all_finite());
        assert!(p.forward(&ctx, ctx.input(Tensor::zeros(&[1, 6, 1, 4]))).is_err());
        assert!(p.forward(&ctx, ctx.input(Tensor::zeros(&[1, 5, 4, 4]))).is_err());
    }
    assert!(PfaeConfig { dilations: vec![], ..Default::default() }.validate().is_err());
    assert!(PfaeConfig { dilations: vec![1, 0], ..Default::default() }.validate().is_err());
}

/// Perturbing one pixel of the reduced map moves the pre-attention output
/// of branch `n` only at offsets in {−z, 0, z}² for that branch's dilation.
#[test]
fn branch_dilation_controls_receptive_field() {
    let dilations = vec![1, 3, 5, 7];
    let (p, store) = pfae(small_pfae(dilations.clone()), 3);
    let (s, c0) = (24usize, 12usize);
    let e = Tensor::uniform(&[1, 4, s, s], -1.0, 1.0, &mut seeded_rng(4));
    let mut bumped = e.clone();
    for ch in 0..4 {
        bumped.data_mut()[ch * s * s + c0 * s + c0] += 0.5;
    }
    let tape = Tape::new();
    let ctx = store.bind(&tape, false);
    for (n, &z) in dilations.iter().enumerate() {
        let base = p.branch_pre_attention(&ctx, ctx.input(e.clone()), None, n).unwrap().value();
        let moved = p.branch_pre_attention(&ctx, ctx.input(bumped.clone()), None, n).unwrap().value();
        for oy in 0..s {
            for ox in 0..s {
                let changed = (0..4).any(|ch| (moved.at(&[0, ch, oy, ox]) - base.at(&[0, ch, oy, ox])).abs() > 1e-12);
                let (dy, dx) = (oy as isize - c0 as isize, ox as isize - c0 as isize);
                let zi = z as isize;
                let reach = dy.abs() <= zi && dx.abs() <= zi && dy % zi == 0 && dx % zi == 0;
                assert_eq!(changed, reach, "branch {n} (z={z}) at ({oy},{ox})");
            }
        }
    }
    assert!(p.branch_pre_attention(&ctx, ctx.input(e), None, 4).is_err());
}

#[test]
fn mfm_preserves_shape() {
    let cfgs = [
        (MfmConfig::with_channels(8), [1, 8, 8, 8]),
        (MfmConfig { channels: 12, heads: 2, kernels: vec![3, 5, 7], ..Default::default() }, [2, 12, 4, 6]),
        (MfmConfig { channels: 8, heads: 1, kernels: vec![3], mlp_ratio: 2, gate: GateAct::Sigmoid }, [1, 8, 5, 5]),
    ];
    for (i, (cfg, shape)) in cfgs.into_iter().enumerate() {
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(i as u64);
        let m = Mfm::new(&mut Init::new(&mut store, &mut rng), cfg.clone()).unwrap();
        assert_eq!(store.num_scalars(), Mfm::num_params(&cfg));
        let tape = Tape::new();
        let ctx = store.bind(&tape, false);
        let x = Tensor::uniform(&shape, -1.0, 1.0, &mut rng);
        let y = m.forward(&ctx, ctx.input(x)).unwrap().value();
        assert_eq!(y.shape(), &shape);
        assert!(y.all_finite());
        let mut wrong = shape;
        wrong[1] += 2;
        assert!(m.forward(&ctx, ctx.input(Tensor::zeros(&wrong))).is_err());
    }
    assert!(MfmConfig { kernels: vec![4], ..Default::default() }.validate().is_err());
    assert!(MfmConfig { channels: 6, ..Default::default() }.validate().is_err());
    assert!(MfmConfig { heads: 3, ..Default::default() }.validate().is_err());
}

#[test]
fn frd_and_head_shapes() {
    let mut store = ParamStore::new();
    let mut rng = seeded_rng(7);
    let mut init = Init::new(&mut store, &mut rng);
    let frd = Frd::new(&mut init.sub("frd"), 4, &[6, 8]).unwrap();
    let head = Head::new(&mut init.sub("head"), 4).unwrap();
    assert_eq!(store.num_scalars(), Frd::num_params(4, &[6, 8]) + Head::num_params(4));
    let tape = Tape::new();
    let ctx = store.bind(&tape, false);
    let f = ctx.input(Tensor::uniform(&[2, 4, 8, 8], -1.0, 1.0, &mut seeded_rng(8)));
    let a1 = ctx.input(Tensor::uniform(&[2, 6, 4, 4], -1.0, 1.0, &mut seeded_rng(9)));
    let a2 = ctx.input(Tensor::uniform(&[2, 8, 2, 2], -1.0, 1.0, &mut seeded_rng(10)));
    let g = frd.forward(&ctx, f, &[a1, a2]).unwrap();
    assert_eq!(g.shape(), vec![2, 4, 8, 8]);
    let ra = frd.reverse_map(&ctx, f, &[a1, a2]).unwrap().value();
    // each auxiliary contributes two terms in (0, 1)
    assert!(ra.data().iter().all(|&v| v > 0.0 && v < 4.0));
    let logit = head.forward(&ctx, g, 32, 32).unwrap();
    assert_eq!(logit.shape(), vec![2, 1, 32, 32]);
    assert!(frd.forward(&ctx, f, &[]).is_err());
    assert!(frd.forward(&ctx, f, &[a1]).is_err());
    assert!(frd.forward(&ctx, a1, &[a1, a2]).is_err());
}
