use bp_scanmatch::ExperimentConfig;

#[test]
#[ignore]
fn probe() {
    let mut config = ExperimentConfig::default();
    config.seed = 42;
    config.n_mc = 1;
    config.max_frames = Some(10);
    if let Ok(n) = std::env::var("PROBE_NP") {
        config.inference.n_p = n.parse().unwrap();
    }
    if let Ok(n) = std::env::var("PROBE_NDA") {
        config.inference.n_da = n.parse().unwrap();
    }
    let t0 = std::time::Instant::now();
    let (report, stats) = bp_scanmatch::run_benchmark(&config).unwrap();
    println!(
        "wall {:.1}s total {:.1}s per-method {:?} measured {} degraded {}",
        t0.elapsed().as_secs_f64(),
        stats.total_seconds,
        stats.per_method_seconds,
        report.measured_frames,
        report.degraded
    );
    for m in &report.methods {
        println!(
            "{}: failures {} q {:?}",
            m.method,
            m.failures,
            m.quantiles.as_ref().map(|q| (q.e_trans.q50, q.e_trans.q95))
        );
    }
}
