use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use enscontrol::{msa_step, InnerConfig};
use enscontrol_bench::s6_instance;

fn step(c: &mut Criterion) {
    let inst = s6_instance(200, 16);
    let lr = 1.0 / inst.constants.l_h;
    c.bench_function("msa_step s6 N=200 16 members", |b| {
        b.iter(|| {
            msa_step(
                inst.model.as_ref(),
                black_box(&inst.control),
                &inst.batch,
                &inst.weights,
                &inst.set,
                InnerConfig::default(),
                lr,
            )
            .unwrap()
        })
    });
}

criterion_group!(benches, step);
criterion_main!(benches);
