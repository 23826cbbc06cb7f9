use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use feb_core::device::HitRecord;
use feb_core::emulator::{BoardType, Emulator};
use feb_core::exec::Exec;
use feb_core::fit::linear_fit;
use feb_core::link::{Link, LinkOptions};
use feb_core::scan::{default_operating_config, sample_stats, DacTarget, ScanParams, Scanner};
use feb_core::scenario::Scenario;
use feb_core::wire::{decode_frame, encode_frame, Frame, Message};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EXECS: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn channel_stats(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let samples: Vec<Vec<u16>> = (0..512)
        .map(|_| (0..2000).map(|_| rng.random_range(600..700)).collect())
        .collect();
    let mut g = c.benchmark_group("channel_stats_512x2000");
    for (name, exec) in EXECS {
        g.bench_function(name, |b| b.iter(|| exec.map(black_box(&samples), |s| sample_stats(s))));
    }
    g.finish();
}

fn gain_fits(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let sets: Vec<Vec<(f64, f64)>> = (0..512)
        .map(|_| (0..64).map(|i| (i as f64, 3.0 * i as f64 + rng.random_range(-1.0..1.0))).collect())
        .collect();
    let mut g = c.benchmark_group("linear_fit_512x64");
    for (name, exec) in EXECS {
        g.bench_function(name, |b| b.iter(|| exec.map(black_box(&sets), |p| linear_fit(p).unwrap().slope)));
    }
    g.finish();
}

fn frame_decode(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let frames: Vec<Vec<u8>> = (0..256)
        .map(|i| {
            let hits = (0..1000)
                .map(|_| HitRecord {
                    vmm: rng.random_range(0..8),
                    channel: rng.random_range(0..64),
                    pdo: rng.random_range(0..1024),
                    bcid: rng.random_range(0..4096),
                    flags: 0,
                })
                .collect();
            encode_frame(&Frame::new(i, Message::HitData(hits))).unwrap()
        })
        .collect();
    let mut g = c.benchmark_group("decode_hit_frames_256x1000");
    for (name, exec) in EXECS {
        g.bench_function(name, |b| b.iter(|| exec.map(black_box(&frames), |f| decode_frame(f).is_ok())));
    }
    g.finish();
}

fn seed_sweep(c: &mut Criterion) {
    let seeds: Vec<u64> = (0..8).collect();
    let mut g = c.benchmark_group("baseline_scan_seed_sweep");
    g.sample_size(10);
    for (name, exec) in EXECS {
        g.bench_with_input(BenchmarkId::new(name, seeds.len()), &seeds, |b, seeds| {
            b.iter(|| {
                exec.map(seeds, |&seed| {
                    let emu = Emulator::new(BoardType::Pfeb, seed, &Scenario::default()).unwrap();
                    let link = Link::in_process(emu, LinkOptions { record_transcript: false, ..Default::default() });
                    let mut s = Scanner::connect(link, ScanParams::default(), default_operating_config())
                        .unwrap()
                        .with_exec(Exec::Sequential);
                    let b = s.run_baseline_scan().unwrap();
                    let t = s.run_dac_calibration(DacTarget::Threshold).unwrap();
                    (b.vmms[0].median_mv, t.vmms[0].slope_mv_per_count)
                })
            })
        });
    }
    g.finish();
}

criterion_group!(benches, channel_stats, gain_fits, frame_decode, seed_sweep);
criterion_main!(benches);
