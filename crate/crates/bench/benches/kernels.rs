use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand::rngs::StdRng;

use pseudoseg_core::autograd::{ConvGeom, Graph};
use pseudoseg_core::data::ShapesDataset;
use pseudoseg_core::evaluate::decoder_logits;
use pseudoseg_core::sgc::sgc_propagate;
use pseudoseg_core::training::init_rng;
use pseudoseg_core::{fuse, FusionConfig, ModelConfig, SegModel, Tensor};

fn random(rng: &mut StdRng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

fn conv(c: &mut Criterion) {
    let mut rng = StdRng::seed_from_u64(0);
    let x = random(&mut rng, &[8, 32, 16, 16]);
    let w = random(&mut rng, &[48, 32, 3, 3]);
    c.bench_function("conv3x3_dil4_32to48_16x16_b8_fwd_bwd", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let xv = g.param(x.clone());
            let wv = g.param(w.clone());
            let y = g.conv2d(xv, wv, None, ConvGeom::same(3, 4));
            let seed = Tensor::new(g.shape(y).to_vec(), vec![1.0; g.value(y).len()]);
            g.backward_with(y, seed, None)
        })
    });
}

fn sgc(c: &mut Criterion) {
    let mut rng = StdRng::seed_from_u64(1);
    let m = random(&mut rng, &[256, 4]);
    let h = random(&mut rng, &[256, 80]);
    let wk = random(&mut rng, &[80, 16]);
    let wv = random(&mut rng, &[80, 16]);
    let wc = random(&mut rng, &[4, 4]);
    c.bench_function("sgc_propagate_L256_C4", |b| b.iter(|| sgc_propagate(&m, &h, &wk, &wv, &wc)));
}

fn fusion(c: &mut Criterion) {
    let mut rng = StdRng::seed_from_u64(2);
    let p = random(&mut rng, &[8, 4, 64, 64]);
    let m = random(&mut rng, &[8, 4, 64, 64]);
    let cfg = FusionConfig::default();
    c.bench_function("fuse_8x4x64x64", |b| b.iter(|| fuse(&p, &m, &cfg)));
}

fn forward(c: &mut Criterion) {
    let model = SegModel::new(ModelConfig::default(), &mut init_rng(0)).unwrap();
    let ds = ShapesDataset::generate(8, 0, (64, 64), 4, "b").unwrap();
    c.bench_function("desk_eval_forward_b8_64x64", |b| b.iter(|| decoder_logits(&model, ds.samples())));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = conv, sgc, fusion, forward
}
criterion_main!(benches);
