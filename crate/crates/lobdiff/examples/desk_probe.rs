//! Tuning probe for the desk-scale experiment: trains the desk preset
//! for one epoch on the synthetic walk stream, samples futures, and
//! prints the decode repair breakdown so hyperparameters can be judged
//! quickly without running the full acceptance suite.
//!
//! Usage: desk_probe [batch_size] [lr] [future_only] [sample_steps]

use std::time::Instant;

use ndarray::{s, Array3};

use lobdiff::book::{WindowMode, WindowSpec};
use lobdiff::codec::{self, LobImage, NormSpec};
use lobdiff::diffusion::{sample_inpaint_batch, DiffusionSchedule};
use lobdiff::nn::train::{TrainOptions, Trainer};
use lobdiff::nn::UNetConfig;
use lobdiff::synth::{gen_stream, SynthRegime};

const HISTORY: usize = 40;
const PRED: usize = 24;
const LEVELS: usize = 4;
const SIDE: usize = HISTORY + PRED;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let batch_size: usize = args.get(1).map_or(4, |v| v.parse().unwrap());
    let lr: f64 = args.get(2).map_or(1e-3, |v| v.parse().unwrap());
    let future_only: bool = args.get(3).map_or(false, |v| v.parse().unwrap());
    let sample_steps: usize = args.get(4).map_or(1_000, |v| v.parse().unwrap());
    println!("batch={batch_size} lr={lr} future_only={future_only} sample_steps={sample_steps}");

    let stream = gen_stream(SynthRegime::Walk, 60_000, LEVELS, 42).unwrap();
    let (train_states, _heldout) = stream.split_at(50_000);
    let spec = WindowSpec::new(HISTORY, PRED, LEVELS, SIDE).unwrap();
    let norm = NormSpec { history_len: HISTORY, rolling_window: None, stat_cols: None };
    let data: Vec<(Array3<f64>, usize)> =
        lobdiff::book::iterate_windows(train_states, &spec, WindowMode::Train)
            .map(|w| {
                let img = codec::encode_window(w, LEVELS).unwrap();
                let normed = codec::normalize(&img, &norm).unwrap();
                let (square, _) = codec::pad_to_square(&normed).unwrap();
                (square, HISTORY)
            })
            .collect();
    println!("windows={} steps/epoch={}", data.len(), data.len().div_ceil(batch_size));

    let sched = DiffusionSchedule::linear(1_000, 1e-4, 0.02).unwrap();
    let mut trainer = Trainer::new(UNetConfig::desk(), lr, 7).unwrap();
    let opts = TrainOptions { epochs: 1, batch_size, future_only };
    let clock = Instant::now();
    let losses = trainer
        .train(&sched, &data, &opts, |step, loss| {
            if step % 100 == 0 {
                println!("  step {step:5} loss {loss:.4} ({:.1}s)", clock.elapsed().as_secs_f64());
            }
        })
        .unwrap();
    let train_secs = clock.elapsed().as_secs_f64();
    let tail = &losses[losses.len().saturating_sub(50)..];
    let tail_mean = tail.iter().sum::<f64>() / tail.len() as f64;
    println!("train: {train_secs:.1}s, {} steps, mean loss over last 50 = {tail_mean:.4}", losses.len());

    let window = &train_states[train_states.len() - SIDE..];
    let img = codec::encode_window(window, LEVELS).unwrap();
    let normed = codec::normalize(&img, &NormSpec::history_only(HISTORY)).unwrap();
    let (square, prov) = codec::pad_to_square(&normed).unwrap();

    let seeds: Vec<u64> = (0..6).map(|i| 1_000 + i).collect();
    let clock = Instant::now();
    let squares = sample_inpaint_batch(&trainer.net, &sched, &square, HISTORY, sample_steps, &seeds).unwrap();
    println!("sample: {:.1}s for {} lanes at {sample_steps} steps", clock.elapsed().as_secs_f64(), seeds.len());

    let mut repaired = 0;
    let mut columns = 0;
    let (mut resorted, mut merged, mut clamped, mut uncrossed, mut compacted) = (0, 0, 0, 0, 0);
    for (i, sq) in squares.iter().enumerate() {
        let (p, sz) = codec::unpad(sq, &prov).unwrap();
        let full = normed.like(p, sz).unwrap();
        let raw = codec::denormalize(&full).unwrap();
        let fut = LobImage::from_grids(
            raw.prices.slice(s![.., HISTORY..]).to_owned(),
            raw.sizes.slice(s![.., HISTORY..]).to_owned(),
            raw.timestamps[HISTORY..].to_vec(),
            raw.levels,
        )
        .unwrap();
        let out = codec::decode_image(&fut).unwrap();
        let r = &out.report;
        println!(
            "  lane {i}: {}/{} repaired (resort {}, merge {}, clamp {}, uncross {}, compact {})",
            r.repaired_columns, r.columns, r.resorted, r.merged, r.clamped_sizes, r.uncrossed_drops, r.compacted
        );
        repaired += r.repaired_columns;
        columns += r.columns;
        resorted += r.resorted;
        merged += r.merged;
        clamped += r.clamped_sizes;
        uncrossed += r.uncrossed_drops;
        compacted += r.compacted;
    }
    println!(
        "TOTAL: rate {:.3} ({repaired}/{columns}), resort {resorted}, merge {merged}, clamp {clamped}, uncross {uncrossed}, compact {compacted}",
        repaired as f64 / columns as f64
    );
}
