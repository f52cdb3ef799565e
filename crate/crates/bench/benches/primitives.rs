use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion, Throughput};
use otakey_core::adversary::{honest_frames, Knowledge};
use otakey_core::crypto::{open, seal};
use otakey_core::flash::DEFAULT_FLASH_SIZE;
use otakey_core::scenario::{sample_firmware, World};
use otakey_core::{FlashImage, Flow, KeyKind, KeyRng};

fn envelope(c: &mut Criterion) {
    let mut rng = KeyRng::from_seed(7);
    let key = rng.key();
    let mut g = c.benchmark_group("envelope");
    for len in [48usize, 1024] {
        let plaintext = vec![0x5A; len];
        let sealed = seal(&key, &plaintext, &mut rng).unwrap();
        g.throughput(Throughput::Bytes(len as u64));
        g.bench_function(format!("seal/{len}"), |b| b.iter(|| seal(&key, black_box(&plaintext), &mut rng).unwrap()));
        g.bench_function(format!("open/{len}"), |b| b.iter(|| open(&key, black_box(&sealed)).unwrap()));
    }
    g.finish();
}

fn flash_commit(c: &mut Criterion) {
    let mut rng = KeyRng::from_seed(11);
    let mut burned = FlashImage::blank(DEFAULT_FLASH_SIZE);
    burned.first_stage_burn(&rng.key(), &sample_firmware(4096)).unwrap();
    let ak = rng.key();
    c.bench_function("flash/agent_key_write_and_commit", |b| {
        b.iter_batched(
            || burned.clone(),
            |mut flash| {
                let pending = flash.begin_key_write(KeyKind::AgentKey, &ak, &[]).unwrap();
                flash.commit_key(&pending).unwrap();
                flash
            },
            BatchSize::SmallInput,
        )
    });
    c.bench_function("flash/boot_scan", |b| b.iter(|| black_box(&burned).scan()));
}

fn flows(c: &mut Criterion) {
    let mut g = c.benchmark_group("flow");
    g.bench_function("ak_init", |b| {
        b.iter_batched(|| World::new(3, 1), |mut w| w.run(0, Flow::AkInit).unwrap(), BatchSize::SmallInput)
    });
    for flow in [Flow::AkRotate, Flow::CkUpdate] {
        g.bench_function(flow.to_string(), |b| {
            b.iter_batched(
                || {
                    let mut w = World::new(3, 1);
                    w.provision(0).unwrap();
                    w
                },
                |mut w| w.run(0, flow).unwrap(),
                BatchSize::SmallInput,
            )
        });
    }
    g.finish();
}

fn knowledge(c: &mut Criterion) {
    let frames = honest_frames(Flow::CkUpdate, 5);
    c.bench_function("adversary/knowledge_closure", |b| b.iter(|| Knowledge::derive(black_box(&frames), &[])));
}

criterion_group!(benches, envelope, flash_commit, flows, knowledge);
criterion_main!(benches);
