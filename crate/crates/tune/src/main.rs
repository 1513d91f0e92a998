use std::time::Instant;

use cascade_kd::config::ExperimentConfig;
use cascade_kd::data::{generate, make_splits, Dataset, DatasetSplit, Modality};
use cascade_kd::distill::IcStrategy;
use cascade_kd::landscape::{flatness, scan_ic_landscape, IcSelector};
use cascade_kd::runner::{parallel_map, prepare_run, run_keys, strategy_study, train_run_ics, RunKey};

fn centroid_acc(ds: &Dataset, m: Modality, split: &DatasetSplit) -> f64 {
    let k = ds.spec.num_classes;
    let dim = ds.spec.feature_dim(m);
    let mut centroids = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for &i in &split.train {
        let s = &ds.samples[i];
        counts[s.label] += 1;
        for (c, v) in centroids[s.label].iter_mut().zip(s.features(m)) {
            *c += v;
        }
    }
    for (c, n) in centroids.iter_mut().zip(&counts) {
        for v in c.iter_mut() { *v /= *n as f64; }
    }
    let mut hits = 0usize;
    for &i in &split.test {
        let s = &ds.samples[i];
        let best = (0..k).min_by(|&a, &b| {
            let da: f64 = centroids[a].iter().zip(s.features(m)).map(|(c, v)| (c - v) * (c - v)).sum();
            let db: f64 = centroids[b].iter().zip(s.features(m)).map(|(c, v)| (c - v) * (c - v)).sum();
            da.partial_cmp(&db).unwrap()
        }).unwrap();
        if best == s.label { hits += 1; }
    }
    hits as f64 / split.test.len() as f64
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let class_sep: f64 = args.get(1).and_then(|v| v.parse().ok()).unwrap_or(0.05);
    let motion_sep: f64 = args.get(2).and_then(|v| v.parse().ok()).unwrap_or(0.35);
    let mode = args.get(3).map(|s| s.as_str()).unwrap_or("study");

    let mut cfg = ExperimentConfig::default();
    cfg.data.class_sep = class_sep;
    cfg.data.motion_sep = motion_sep;
    cfg.validate().unwrap();

    println!("=== class_sep = {class_sep}, motion_sep = {motion_sep}, mode = {mode} ===");

    // Oracle separability at this difficulty.
    let ds = generate(&cfg.data).unwrap();
    let splits = make_splits(ds.len(), cfg.data.seed).unwrap();
    for m in Modality::ALL {
        let acc: f64 = splits.iter().map(|s| centroid_acc(&ds, m, s)).sum::<f64>() / 3.0;
        println!("centroid {m}: {acc:.4}");
    }

    if mode == "oracle" { return; }

    let t0 = Instant::now();
    if mode == "study" || mode == "all" {
        let study = strategy_study(&cfg, &IcStrategy::ALL).unwrap();
        println!("study wall time: {:.1}s", t0.elapsed().as_secs_f64());
        for s in IcStrategy::ALL {
            println!("strategy {s}: mean IC acc {:.4}", study.strategy_mean(s));
        }
        let diff = study.strategy_mean(IcStrategy::PkdCurriculum) - study.strategy_mean(IcStrategy::Ce);
        println!("pkd - ce (9-IC mean): {diff:+.4}");
        for m in Modality::ALL {
            for ic in 1..=3 {
                let pkd: f64 = { let v = study.cell(IcStrategy::PkdCurriculum, m, ic); v.iter().sum::<f64>() / v.len() as f64 };
                let ce: f64 = { let v = study.cell(IcStrategy::Ce, m, ic); v.iter().sum::<f64>() / v.len() as f64 };
                let ifr: f64 = { let v = study.cell(IcStrategy::IframeKd, m, ic); v.iter().sum::<f64>() / v.len() as f64 };
                let anti: f64 = { let v = study.cell(IcStrategy::PkdAnti, m, ic); v.iter().sum::<f64>() / v.len() as f64 };
                println!("  {m} ic{ic}: ce {ce:.4} pkd {pkd:.4} (diff {:+.4}) iframe-kd {ifr:.4} anti {anti:.4}", pkd - ce);
            }
        }
        let fc_mean = |s: IcStrategy, m: Modality| -> f64 {
            let v = study.cell(s, m, 4);
            v.iter().sum::<f64>() / v.len() as f64
        };
        for m in Modality::ALL {
            println!("  {m} FC acc: {:.4}", fc_mean(IcStrategy::Ce, m));
        }
    }

    if mode == "flatness" || mode == "all" {
        // 3 seeds, split 1: train CE and PKD ICs, compare iframe IC flatness.
        let keys: Vec<RunKey> = cfg.run.seeds.iter().map(|&s| RunKey { dataset_seed: s, split_id: 1 }).collect();
        let results = parallel_map(keys, |key| {
            let prepared = prepare_run(&cfg, key).unwrap();
            let mut out = Vec::new();
            for strategy in [IcStrategy::Ce, IcStrategy::PkdCurriculum] {
                let mut model = train_run_ics(&cfg, &prepared, strategy).unwrap();
                let mut mean_score = 0.0;
                for attach in 1..=3 {
                    let sel = IcSelector { modality: Modality::Iframe, attach_point: attach };
                    let grid = scan_ic_landscape(&mut model, sel, &prepared.dataset, &prepared.split.train, 1.0, 21, 7).unwrap();
                    let score = flatness(&grid, 1.0).unwrap().score;
                    mean_score += score / 3.0;
                }
                out.push((key.dataset_seed, strategy, mean_score));
            }
            out
        });
        let mut ce_scores = Vec::new();
        let mut pkd_scores = Vec::new();
        for run in &results {
            for &(seed, strategy, score) in run {
                println!("  flatness seed {seed} {strategy}: {score:.6}");
                if strategy == IcStrategy::Ce { ce_scores.push(score); } else { pkd_scores.push(score); }
            }
        }
        let med = |mut v: Vec<f64>| { v.sort_by(|a, b| a.partial_cmp(b).unwrap()); v[v.len() / 2] };
        println!("flatness median: ce {:.6} pkd {:.6} (pkd <= ce: {})", med(ce_scores.clone()), med(pkd_scores.clone()), med(pkd_scores) <= med(ce_scores));
    }
    println!("total wall: {:.1}s", t0.elapsed().as_secs_f64());
}
