use criterion::{criterion_group, criterion_main, BatchSize, BenchmarkId, Criterion, Throughput};
use mailmill_core::audit::{self, AuditSeed};
use mailmill_core::dpf::{self, DpfParams, VirtualAddress};
use mailmill_core::field::{FieldElement, Prime128};
use mailmill_core::payload::MessageLayout;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn setup(msg_bytes: usize) -> (DpfParams, Vec<FieldElement<Prime128>>) {
    let layout = MessageLayout::new::<Prime128>(msg_bytes);
    let payload = layout.payload::<Prime128>(&vec![0xab; msg_bytes]).unwrap();
    (DpfParams::production(layout.width()), payload)
}

fn keygen(c: &mut Criterion) {
    let mut group = c.benchmark_group("dpf_gen");
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    for msg_bytes in [160, 1024] {
        let (params, payload) = setup(msg_bytes);
        group.bench_with_input(BenchmarkId::from_parameter(msg_bytes), &msg_bytes, |b, _| {
            b.iter(|| dpf::gen(params, VirtualAddress::random(&mut rng), &payload, &mut rng).unwrap())
        });
    }
    group.finish();
}

fn eval_many(c: &mut Criterion) {
    let mut group = c.benchmark_group("dpf_eval_many");
    group.sample_size(10);
    let mut rng = ChaCha20Rng::seed_from_u64(2);
    let (params, payload) = setup(160);
    let (key, _) = dpf::gen(params, VirtualAddress::random(&mut rng), &payload, &mut rng).unwrap();
    for n in [1_000usize, 10_000, 100_000] {
        let addrs: Vec<VirtualAddress> = (0..n).map(|_| VirtualAddress::random(&mut rng)).collect();
        group.throughput(Throughput::Elements(n as u64));
        group.bench_with_input(BenchmarkId::from_parameter(n), &addrs, |b, addrs| b.iter(|| key.eval_many(addrs)));
    }
    group.finish();
}

fn client_audit(c: &mut Criterion) {
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    let (params, payload) = setup(160);
    let v = VirtualAddress::random(&mut rng);
    let (ka, kb) = dpf::gen(params, v, &payload, &mut rng).unwrap();
    let seed = AuditSeed([7; 16]);
    c.bench_function("client_audit", |b| {
        b.iter(|| {
            let checks = audit::target_checks(&seed, 12_345, v, &ka.eval(v), &kb.eval(v));
            audit::snip_gen(&checks, &mut rng)
        })
    });
}

fn server_audit(c: &mut Criterion) {
    let mut group = c.benchmark_group("server_sketch");
    let mut rng = ChaCha20Rng::seed_from_u64(4);
    for n in [1_000usize, 100_000] {
        let w: Vec<FieldElement<Prime128>> = (0..n).map(|_| FieldElement::random(&mut rng)).collect();
        group.throughput(Throughput::Elements(n as u64));
        group.bench_with_input(BenchmarkId::from_parameter(n), &w, |b, w| {
            b.iter_batched(
                || AuditSeed([n as u8; 16]),
                |seed| audit::server_sketch(w, &seed),
                BatchSize::SmallInput,
            )
        });
    }
    group.finish();
}

criterion_group!(benches, keygen, eval_many, client_audit, server_audit);
criterion_main!(benches);
