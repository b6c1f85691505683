use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use enscontrol::{backward_batch, forward_batch, maximize_hamiltonian, HamiltonianContext, InnerConfig};
use enscontrol_bench::s6_instance;

// one node of the inner problem; u* is near 0 here, so the zero start is the short one
fn inner(c: &mut Criterion) {
    let inst = s6_instance(200, 16);
    let model = inst.model.as_ref();
    let xs = forward_batch(model, &inst.control, &inst.batch).unwrap();
    let ps = backward_batch(model, &inst.control, &inst.batch, &xs, &inst.weights).unwrap();
    let ctx = HamiltonianContext::from_solution(model, &inst.batch, &xs, &ps, 100, inst.weights).unwrap();
    let step = 1.0 / inst.constants.l_h;
    let probe = inst.control.at_node(100).clone();
    let zero = probe.map(|_| 0.0);

    let mut group = c.benchmark_group("maximize_hamiltonian");
    group.bench_function("from_zero", |b| {
        b.iter(|| maximize_hamiltonian(&ctx, black_box(&zero), &inst.set, InnerConfig::default(), step).unwrap())
    });
    group.bench_function("from_probe", |b| {
        b.iter(|| maximize_hamiltonian(&ctx, black_box(&probe), &inst.set, InnerConfig::default(), step).unwrap())
    });
    group.bench_function("grad", |b| b.iter(|| ctx.grad(black_box(&probe))));
    group.finish();
}

criterion_group!(benches, inner);
criterion_main!(benches);
