use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use suna_bench::{images, uniform};
use suna_core::attention::{attention_forward, AttentionParams};
use suna_core::network::{Network, NetworkConfig, Variant};
use suna_core::{Graph, Mode};

fn conv(c: &mut Criterion) {
    let x = uniform(&[8, 16, 64, 64], 1);
    let w = uniform(&[32, 16, 3, 3], 2);
    c.bench_function("conv3x3 8x16x64x64 -> 32 forward", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let xv = g.constant(x.clone()).unwrap();
            let wv = g.constant(w.clone()).unwrap();
            g.conv2d(xv, wv, None, 1, 1).unwrap()
        })
    });
    c.bench_function("conv3x3 8x16x64x64 -> 32 forward+backward", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let xv = g.leaf(x.clone().with_grad()).unwrap();
            let wv = g.leaf(w.clone().with_grad()).unwrap();
            let y = g.conv2d(xv, wv, None, 1, 1).unwrap();
            let s = g.sum(y).unwrap();
            g.backward(s).unwrap();
        })
    });
}

fn attention(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (d, side) in [(32, 8), (128, 32)] {
        let mut p = AttentionParams::<f32>::init(d, &mut rng);
        p.gamma = suna_core::Tensor::scalar(0.5).with_grad();
        let x = uniform(&[2, d, side, side], 4);
        c.bench_function(&format!("attention D={d} N={}", side * side), |b| {
            b.iter(|| {
                let mut g = Graph::new();
                let xv = g.leaf(x.clone().with_grad()).unwrap();
                let vars = p.bind(&mut g).unwrap();
                let out = attention_forward(&mut g, xv, &vars).unwrap();
                let s = g.sum(out.y).unwrap();
                g.backward(s).unwrap();
            })
        });
    }
}

fn network(c: &mut Criterion) {
    let pre = images(8, 64, 5);
    let post = images(8, 64, 6);
    for variant in [Variant::SiamUnetAttnConc, Variant::FcEf] {
        let net = Network::new(NetworkConfig::desk(variant), 0).unwrap();
        c.bench_function(&format!("{variant} desk predict batch 8"), |b| {
            b.iter(|| net.predict(&pre, &post).unwrap())
        });
        c.bench_function(&format!("{variant} desk train forward batch 8"), |b| {
            b.iter_batched(
                || net.clone(),
                |mut n| n.forward(&pre, &post, Mode::Train).unwrap(),
                BatchSize::LargeInput,
            )
        });
    }
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = conv, attention, network
}
criterion_main!(benches);
