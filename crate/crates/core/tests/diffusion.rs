use graffiti_core::attention::{identity_self_attention, self_attention, ExtendedAttentionWeights, IdentityEmbedding};
use graffiti_core::diffusion::{forward_marginal, forward_step, sample, Composition, Conditioning, DenoiserModel};
use graffiti_core::facegen::{face_grid, render_face};
use graffiti_core::pipeline::{
    diffuse_latent, face_codec, face_latent, identity_embedding, pipeline_shape, prompt_conditioning, PipelineConfig,
};
use graffiti_core::{AttentionWeights64, NoiseSchedule64, RngStream, Tensor64};

#[test]
fn zero_identity_matches_plain_attention() {
    let mut rng = RngStream::new(4);
    for _ in 0..200 {
        let base = AttentionWeights64::random(6, 3, 0.7, &mut rng);
        let mut w = ExtendedAttentionWeights::from_base(base.clone(), 5);
        w.uq = Tensor64::from_fn(&[5, 3], |_| rng.normal(0.0, 1.0));
        w.uk = Tensor64::from_fn(&[5, 3], |_| rng.normal(0.0, 1.0));
        let x = Tensor64::from_fn(&[7, 6], |_| rng.normal(0.0, 1.0));
        let a = identity_self_attention(&x, &IdentityEmbedding::zeros(5), &w).unwrap();
        let b = self_attention(&x, &base).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() <= 1e-12);
    }
}

#[test]
fn zero_identity_sampling_is_byte_identical() {
    let cfg = PipelineConfig::default();
    let mut model = DenoiserModel::init(pipeline_shape(), &mut RngStream::new(1)).unwrap();
    let mut rng = RngStream::new(2);
    model.attn.uq = Tensor64::from_fn(model.attn.uq.shape(), |_| rng.normal(0.0, 0.5));
    model.attn.uk = Tensor64::from_fn(model.attn.uk.shape(), |_| rng.normal(0.0, 0.5));
    let codec = face_codec(32).unwrap();
    let face = &face_grid(1, 5)[0];
    let guide = face_latent(&render_face(face, 32).unwrap(), &codec).unwrap();
    let prompt = prompt_conditioning("graffiti portrait").unwrap();
    let seed = RngStream::new(9);
    let zero = IdentityEmbedding::zeros(pipeline_shape().d_id);
    let a = diffuse_latent(&model, &prompt, Some(zero), Some(&guide), &cfg, &seed).unwrap();
    let b = diffuse_latent(&model, &prompt, None, Some(&guide), &cfg, &seed).unwrap();
    assert_eq!(a, b);
    let c = diffuse_latent(
        &model,
        &prompt,
        Some(identity_embedding(&face.attrs)),
        Some(&guide),
        &cfg,
        &seed,
    )
    .unwrap();
    assert_ne!(a, c);
}

#[test]
fn sampling_repeats_under_a_seed() {
    let model = DenoiserModel::init(pipeline_shape(), &mut RngStream::new(3)).unwrap();
    let sched = NoiseSchedule64::linear(50, 1e-4, 0.02).unwrap();
    let cond = Conditioning::text(prompt_conditioning("wall").unwrap());
    let run = |s| {
        sample(
            &model,
            &cond,
            &sched,
            &[8, 8],
            None,
            &Composition::none(),
            &RngStream::new(s),
        )
        .unwrap()
    };
    assert_eq!(run(1), run(1));
    assert_ne!(run(1), run(2));
}

#[test]
fn marginal_agrees_with_iterated_steps() {
    let sched = NoiseSchedule64::linear(100, 1e-4, 0.02).unwrap();
    let x0 = Tensor64::vector(vec![1.5]).unwrap();
    let n = 4000;
    let mut rng = RngStream::new(6);
    for t in [1, 50, 100] {
        let (mut a, mut b) = (Vec::with_capacity(n), Vec::with_capacity(n));
        for _ in 0..n {
            a.push(forward_marginal(&x0, t, &sched, &mut rng).unwrap().data()[0]);
            let mut x = x0.clone();
            for s in 1..=t {
                x = forward_step(&x, s, &sched, &mut rng).unwrap();
            }
            b.push(x.data()[0]);
        }
        let stats = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / n as f64;
            (m, v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64)
        };
        let ((ma, va), (mb, vb)) = (stats(&a), stats(&b));
        let se = ((va + vb) / n as f64).sqrt();
        assert!((ma - mb).abs() <= 4.0 * se, "t={t} means {ma} {mb}");
        let se_v = (2.0 * (va * va + vb * vb) / (n - 1) as f64).sqrt();
        assert!((va - vb).abs() <= 4.0 * se_v, "t={t} vars {va} {vb}");
    }
}
