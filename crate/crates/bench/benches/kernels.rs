use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};
use hintvqa::metrics::corpus_bleu;
use hintvqa::model::Mode;
use hintvqa::tensor::{conv1d_channels_last, sum};
use hintvqa::train::{batch_loss, predict, Batch};
use hintvqa::Tensor;
use hintvqa_bench::desk_fixture;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng, grad: bool) -> Tensor<f32> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    if grad {
        Tensor::param(data, shape).unwrap()
    } else {
        Tensor::new(data, shape).unwrap()
    }
}

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    // Desk decoder layer: 32 sequences of 64 positions, 64 -> 2x64 channels.
    let x = random(&[32, 64, 64], &mut rng, true);
    let k = random(&[128, 64, 3], &mut rng, true);
    let b = random(&[128], &mut rng, true);
    c.bench_function("conv1d_forward", |bench| {
        bench.iter(|| conv1d_channels_last(black_box(&x), &k, &b, 2, 0).unwrap())
    });
    c.bench_function("conv1d_forward_backward", |bench| {
        bench.iter(|| {
            let y = conv1d_channels_last(&x, &k, &b, 2, 0).unwrap();
            sum(&y).backward().unwrap();
        })
    });
}

fn model(c: &mut Criterion) {
    let fx = desk_fixture(32, 0).unwrap();
    let refs: Vec<_> = fx.samples.iter().collect();
    let batch = Batch::from_samples(&refs);
    let mut group = c.benchmark_group("desk_model");
    group.sample_size(20);
    group.bench_function("loss_forward", |bench| {
        bench.iter(|| batch_loss(&fx.model, &batch, &mut Mode::Eval).unwrap())
    });
    group.bench_function("loss_forward_backward", |bench| {
        bench.iter_batched(
            || fx.model.zero_grad(),
            |_| {
                batch_loss(&fx.model, &batch, &mut Mode::Eval)
                    .unwrap()
                    .backward()
                    .unwrap()
            },
            BatchSize::SmallInput,
        )
    });
    group.bench_function("greedy_decode_32", |bench| {
        bench.iter(|| predict(&fx.model, &fx.samples, 32).unwrap())
    });
    group.finish();
}

fn bleu(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let words = ["a", "b", "c", "d", "e", "f", "g", "h"];
    let mut sentence = || -> Vec<&str> {
        let len = rng.gen_range(1..12);
        (0..len)
            .map(|_| words[rng.gen_range(0..words.len())])
            .collect()
    };
    let cands: Vec<_> = (0..2000).map(|_| sentence()).collect();
    let refs: Vec<_> = (0..2000).map(|_| sentence()).collect();
    c.bench_function("corpus_bleu_2000", |bench| {
        bench.iter(|| corpus_bleu(black_box(&cands), &refs, 4).unwrap())
    });
}

criterion_group!(benches, conv, model, bleu);
criterion_main!(benches);
