use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sensorformer::attention::{block_forward, BlockParams, Ctx, Variant};
use sensorformer::numerics::{Graph, ParamStore, Tensor};
use sensorformer::patching::TokenDims;

fn blocks(c: &mut Criterion) {
    let (n_vars, d_model, heads) = (16, 32, 2);
    let mut group = c.benchmark_group("block_forward");
    group.sample_size(10);
    for variant in Variant::ALL {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let block = BlockParams::init(&mut store, "b", variant, d_model, heads, &mut rng).unwrap();
        for n in [16, 32, 64] {
            let dims = TokenDims { n_vars, n_patches: n, d_model };
            let x = Tensor::new(
                &[dims.rows(), d_model],
                (0..dims.rows() * d_model).map(|_| rng.random_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            group.bench_with_input(BenchmarkId::new(variant.to_string(), n), &x, |b, x| {
                b.iter(|| {
                    let mut g = Graph::with_params(&store);
                    let t = g.input(x.clone());
                    block_forward(&mut g, variant, t, dims, &block, &mut Ctx::eval()).unwrap()
                })
            });
        }
    }
    group.finish();
}

criterion_group!(benches, blocks);
criterion_main!(benches);
