use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use mixlab_bench::{time_operation, BenchOp, DEFAULT_NUM_FEATURES, DEFAULT_STATE_SIZE, DEFAULT_WIDTH};
use mixlab_core::attention::{draw_orthogonal_features, favor_attention, softmax_attention, QkvTriple};
use mixlab_core::ssm::{hydra_channelwise, ssm_channelwise, HydraWeights, SelectiveWeights};
use mixlab_core::{FeatureSequence, MixRng};

const LENGTHS: [usize; 3] = [512, 1024, 2048];

fn qkv(t: usize, d: usize, rng: &mut MixRng) -> QkvTriple {
    let s = (d as f64).powf(-0.25);
    QkvTriple::new(rng.normal_matrix(t, d, s), rng.normal_matrix(t, d, s), rng.normal_matrix(t, d, 1.0)).unwrap()
}

fn attention(c: &mut Criterion) {
    let mut group = c.benchmark_group("attention");
    group.sample_size(10);
    let omega = draw_orthogonal_features(DEFAULT_WIDTH, DEFAULT_NUM_FEATURES, 1).unwrap();
    for t in LENGTHS {
        let input = qkv(t, DEFAULT_WIDTH, &mut MixRng::new(t as u64));
        group.throughput(Throughput::Elements(t as u64));
        group.bench_with_input(BenchmarkId::new("softmax", t), &input, |b, x| b.iter(|| softmax_attention(x).unwrap()));
        group.bench_with_input(BenchmarkId::new("favor", t), &input, |b, x| b.iter(|| favor_attention(x, &omega).unwrap()));
    }
    group.finish();
}

fn scans(c: &mut Criterion) {
    let mut group = c.benchmark_group("scans");
    group.sample_size(10);
    for t in LENGTHS {
        let mut rng = MixRng::new(t as u64);
        let x = FeatureSequence::new(rng.normal_matrix(t, DEFAULT_WIDTH, 1.0)).unwrap();
        let ssm = SelectiveWeights::random(DEFAULT_WIDTH, DEFAULT_STATE_SIZE, &mut rng);
        let hydra = HydraWeights::random(DEFAULT_WIDTH, DEFAULT_STATE_SIZE, &mut rng);
        group.throughput(Throughput::Elements(t as u64));
        group.bench_with_input(BenchmarkId::new("ssm", t), &x, |b, x| b.iter(|| ssm_channelwise(x, &ssm).unwrap()));
        group.bench_with_input(BenchmarkId::new("hydra", t), &x, |b, x| b.iter(|| hydra_channelwise(x, &hydra).unwrap()));
    }
    group.finish();
}

/// The harness itself, at a size small enough for a criterion sample.
fn harness(c: &mut Criterion) {
    c.bench_function("time_operation/ssm_scan", |b| {
        b.iter(|| time_operation(BenchOp::SsmScan.label(), &[64, 128, 256], 16, 4, 3, 0).unwrap())
    });
}

criterion_group!(benches, attention, scans, harness);
criterion_main!(benches);
