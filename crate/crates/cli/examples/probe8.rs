// scratch: criterion-8 recipe search
use deepiv_core::inference::{counterfactual_ci, split_two_stage};
use deepiv_core::net::Activation;
use deepiv_core::outcome::{train_second_stage, SecondStageConfig};
use deepiv_core::rng::RngStream;
use deepiv_core::sim::{simulate, true_h, SimConfig, BASE_SALES};
use deepiv_core::treatment::{train_first_stage, FirstStageConfig, HeadSpec};

fn main() {
    let hidden: Vec<usize> = std::env::var("HIDDEN")
        .unwrap_or("64,32".into())
        .split(',')
        .map(|s| s.parse().unwrap())
        .collect();
    let ss_epochs: usize = std::env::var("SS_EPOCHS").map(|v| v.parse().unwrap()).unwrap_or(500);
    let t_lo: usize = std::env::var("TLO").map(|v| v.parse().unwrap()).unwrap_or(5000);
    let decay: f64 = std::env::var("DECAY").map(|v| v.parse().unwrap()).unwrap_or(0.3);

    let started = std::time::Instant::now();
    let n = 100_000;
    let data = simulate(&SimConfig::new(n, 0.5, 81)).unwrap();
    let (train, leftout) = data.split_at(n / 2);

    let fs = FirstStageConfig {
        head: HeadSpec::Mixture { components: 10 },
        hidden: hidden.clone(),
        activation: Activation::Tanh,
        epochs: std::env::var("FS_EPOCHS").ok().map(|v| v.parse().unwrap()).unwrap_or(150),
        batch_size: 100,
        learning_rate: 3e-3,
        lr_decay: decay,
        patience: std::env::var("FS_PATIENCE").ok().map(|v| v.parse().unwrap()).unwrap_or(10),
        seed: Some(82),
        ..FirstStageConfig::default()
    };
    let tmodel = train_first_stage(&train, &fs).unwrap();
    eprintln!("first stage done ({:.0}s, {} epochs)", started.elapsed().as_secs_f64(), tmodel.training.epochs_run);
    let ss = SecondStageConfig {
        hidden: hidden.clone(),
        activation: Activation::Tanh,
        epochs: ss_epochs,
        batch_size: 100,
        learning_rate: 3e-3,
        lr_decay: decay,
        seed: Some(83),
        ..SecondStageConfig::default()
    };
    let omodel = train_second_stage(&train, &tmodel, &ss).unwrap();
    eprintln!("second stage done ({:.0}s)", started.elapsed().as_secs_f64());

    let (infer_slice, _) = leftout.split_at(t_lo);
    let mut stream = RngStream::root(84);
    let result = split_two_stage(&omodel, &tmodel, &infer_slice, 500, &mut stream).unwrap();

    let mut covered = 0;
    let mut errs = Vec::new();
    let mut halves = Vec::new();
    let mut fitted = Vec::new();
    let mut truths = Vec::new();
    for i in 0..100 {
        let t = 0.05 + 9.9 * i as f64 / 99.0;
        let x = vec![t, 3.0];
        let target = BASE_SALES + true_h(t, 4, 25.0);
        let (est, half) = counterfactual_ci(&result, &omodel, 25.0, &x, 0.95).unwrap();
        if (est - target).abs() <= half { covered += 1; }
        errs.push((est - target).abs());
        halves.push(half);
        fitted.push(est);
        truths.push(target);
    }
    errs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    halves.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let corr = deepiv_core::stats::correlation(&fitted, &truths);
    eprintln!(
        "hidden={hidden:?} ss_epochs={ss_epochs} tlo={t_lo} decay={decay}: corr={corr:.4} covered={covered}/100 ({:.0}s)",
        started.elapsed().as_secs_f64()
    );
    eprintln!(
        "|err| quartiles: {:.2}/{:.2}/{:.2} max {:.2}; half quartiles: {:.2}/{:.2}/{:.2}",
        errs[25], errs[50], errs[75], errs[99], halves[25], halves[50], halves[75]
    );
}
