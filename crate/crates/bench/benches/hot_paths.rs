use std::collections::BTreeSet;
use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use fedsim_bench::{lstm_fixture, transformer_fixture};
use fedsim_core::attacks::{pgd_project, topk_mask};
use fedsim_core::defenses::{multi_krum, DefenseUpdate};
use fedsim_core::nn::{forward_loss, loss_and_grad};

fn bench_forward_backward(c: &mut Criterion) {
    let (lstm, lstm_batch) = lstm_fixture();
    let (gpt, gpt_batch) = transformer_fixture();
    c.bench_function("lstm_forward_32x16", |b| {
        b.iter(|| forward_loss(black_box(&lstm), black_box(&lstm_batch)).unwrap())
    });
    c.bench_function("lstm_backward_32x16", |b| {
        b.iter(|| loss_and_grad(black_box(&lstm), black_box(&lstm_batch)).unwrap())
    });
    c.bench_function("transformer_forward_32x16", |b| {
        b.iter(|| forward_loss(black_box(&gpt), black_box(&gpt_batch)).unwrap())
    });
    c.bench_function("transformer_backward_32x16", |b| {
        b.iter(|| loss_and_grad(black_box(&gpt), black_box(&gpt_batch)).unwrap())
    });
}

fn bench_masks_and_defenses(c: &mut Criterion) {
    let (lstm, lstm_batch) = lstm_fixture();
    let (_, grad) = loss_and_grad(&lstm, &lstm_batch).unwrap();
    let scope: BTreeSet<String> = ["ih".to_string()].into();
    c.bench_function("topk_mask_ih_5pct", |b| {
        b.iter(|| topk_mask(black_box(&grad), 5.0, &scope).unwrap())
    });
    c.bench_function("pgd_project", |b| {
        b.iter(|| pgd_project(black_box(&grad), 0.5).unwrap())
    });
    let updates: Vec<DefenseUpdate> = (0..10)
        .map(|i| {
            let mut delta = grad.clone();
            delta.scale(1.0 + i as f64 * 0.01);
            DefenseUpdate { client_id: i, delta, num_samples: 16 }
        })
        .collect();
    c.bench_function("multi_krum_10x58k", |b| {
        b.iter_batched(
            || updates.clone(),
            |u| multi_krum(u, 1, 8).unwrap(),
            criterion::BatchSize::LargeInput,
        )
    });
}

criterion_group!(benches, bench_forward_backward, bench_masks_and_defenses);
criterion_main!(benches);
