//! Dispatch of each command to the core library.

use optochaos_core::ansatz::solve_ansatz_branches;
use optochaos_core::chaos::{
    bifurcation_sweep, classify_attractor, max_lyapunov_twin, max_lyapunov_with, phase_diagram_grid,
    series_periodicity, AttractorKind, LyapunovResult, Periodicity, SweepOutcome,
};
use optochaos_core::qsd::{
    build_operators_with_budget, master_equation_oracle, run_ensemble_from, run_trajectory_from,
    stroboscopic_points, stroboscopic_section, suggest_truncation, truncation_audit, HilbertTruncation,
    QuantumState,
};
use optochaos_core::sc::{fixed_points, integrate_sc_with, Sampling, ScTrajectory, TWO_PI};
use optochaos_core::spectrum::{detect_subharmonic_order, fundamental, power_spectrum, spectral_lines, SubharmonicOrder};
use optochaos_core::{derive_couplings, CanonicalCoords, Error, ModelParams, Result, ScState};
use rayon::prelude::*;
use serde_json::Value;

use crate::config::{Command, LyapunovMethod, RunConfig};
use crate::output::{float_value, Cell, Outcome, Table};

/// Cutoffs used by oracle-check when none are configured.
pub const ORACLE_DEFAULT_TRUNCATION: (usize, usize) = (4, 4);

/// Runs a validated config. Errors abort the whole command; per-point
/// failures are collected in the outcome.
pub fn execute(cfg: &RunConfig, command: Command) -> Result<Outcome> {
    match command {
        Command::Trajectory => trajectory(cfg),
        Command::FixedPoints => fixed_point_table(cfg),
        Command::Ansatz => ansatz(cfg),
        Command::Lyapunov => lyapunov(cfg),
        Command::Bifurcation => bifurcation(cfg),
        Command::PhaseDiagram => phase_diagram(cfg),
        Command::Spectrum => spectrum(cfg),
        Command::QsdTrajectory => qsd_trajectory(cfg),
        Command::QsdEnsemble => qsd_ensemble(cfg),
        Command::OracleCheck => oracle_check(cfg),
    }
}

fn grid(cfg: &RunConfig) -> Vec<f64> {
    cfg.detuning_grid.as_ref().map(|g| g.points()).unwrap_or_default()
}

fn state_cells(s: &ScState) -> Vec<Cell> {
    let c = s.coords();
    vec![s.alpha.re.into(), s.alpha.im.into(), s.beta.re.into(), s.beta.im.into(), c.x.into(), c.p.into()]
}

fn state_json(s: &ScState) -> Value {
    Value::Array([s.alpha.re, s.alpha.im, s.beta.re, s.beta.im].map(float_value).to_vec())
}

fn section_table(points: &[CanonicalCoords], first_period: usize) -> Table {
    let mut t = Table::new("section", &["period", "x", "p"]);
    for (k, c) in points.iter().enumerate() {
        t.push(vec![(first_period + k).into(), c.x.into(), c.p.into()]);
    }
    t
}

fn trajectory(cfg: &RunConfig) -> Result<Outcome> {
    let traj = integrate_sc_with(
        cfg.initial.state(),
        &cfg.params,
        cfg.span(),
        Sampling::per_period(cfg.integration.samples_per_period),
        cfg.integration.tolerances,
        cfg.transient_cutoff(),
    )?;
    let mut t = Table::new("main", &["tau", "re_alpha", "im_alpha", "re_beta", "im_beta", "x", "p", "transient"]);
    for (&tau, s) in traj.times.iter().zip(&traj.states) {
        let mut row = vec![Cell::F(tau)];
        row.extend(state_cells(s));
        row.push((tau < traj.transient_cutoff).into());
        t.push(row);
    }
    let mut out = Outcome::default();
    out.result("n_samples", traj.len());
    out.result("transient_cutoff", float_value(traj.transient_cutoff));
    if let Some(s) = traj.last_state() {
        out.result("final_state", state_json(&s));
    }
    let discard = cfg.integration.transient_periods.ceil() as usize;
    let coords = traj.coords();
    let section = stroboscopic_points(&traj.times, &coords, discard).unwrap_or_default();
    out.tables.push(t);
    out.tables.push(section_table(&section, discard));
    Ok(out)
}

fn fixed_point_table(cfg: &RunConfig) -> Result<Outcome> {
    let fps = fixed_points(&cfg.params)?;
    let mut t = Table::new(
        "main",
        &["index", "photon_number", "re_alpha", "im_alpha", "re_beta", "im_beta", "x", "p", "stable", "max_growth"],
    );
    for (k, fp) in fps.iter().enumerate() {
        let mut row = vec![Cell::from(k), fp.photon_number.into()];
        row.extend(state_cells(&fp.state));
        row.push(fp.stable.into());
        row.push(fp.max_growth.into());
        t.push(row);
    }
    let mut out = Outcome::default();
    out.result("count", fps.len());
    out.result("stable", fps.iter().filter(|f| f.stable).count());
    out.tables.push(t);
    Ok(out)
}

fn ansatz(cfg: &RunConfig) -> Result<Outcome> {
    let grid = grid(cfg);
    let points = solve_ansatz_branches(&cfg.params, &grid, &cfg.ansatz.spec())?;
    let mut out = Outcome::default();
    let mut t = Table::new("main", &["detuning", "branch_id", "xbar", "amplitude", "residual", "error"]);
    for p in &points {
        match &p.solutions {
            Ok(sols) => {
                for s in sols {
                    t.push(vec![
                        p.detuning.into(),
                        s.branch_id.into(),
                        s.xbar.into(),
                        s.amplitude.into(),
                        s.residual.into(),
                        "".into(),
                    ]);
                }
            }
            Err(e) => {
                out.failures.push(format!("ansatz at detuning {:e}: {e}", p.detuning));
                t.push(vec![p.detuning.into(), Cell::I(-1), f64::NAN.into(), f64::NAN.into(), f64::NAN.into(), e.clone().into()]);
            }
        }
    }
    out.result("grid_points", grid.len());
    out.tables.push(t);
    if !cfg.ansatz.compare {
        return Ok(out);
    }

    let spec = cfg.classify_spec();
    let sims: Vec<Result<_>> = grid
        .par_iter()
        .map(|&d| classify_attractor(&ModelParams { detuning: d, ..cfg.params }, ScState::ORIGIN, &spec))
        .collect();
    let mut c = Table::new(
        "compare",
        &["detuning", "class", "sim_xbar", "sim_amplitude", "ansatz_xbar", "ansatz_amplitude", "rel_error", "error"],
    );
    for (p, sim) in points.iter().zip(sims) {
        match sim {
            Ok(sim) => {
                let amp = 0.5 * (sim.x_max - sim.x_min);
                let nearest = p
                    .solutions
                    .as_ref()
                    .ok()
                    .and_then(|s| {
                        s.iter()
                            .filter(|s| s.amplitude > 0.0)
                            .min_by(|a, b| (a.amplitude - amp).abs().total_cmp(&(b.amplitude - amp).abs()))
                    });
                let (ax, aa) = nearest.map_or((f64::NAN, f64::NAN), |s| (s.xbar, s.amplitude));
                c.push(vec![
                    p.detuning.into(),
                    sim.class.kind.label().into(),
                    sim.x_mean.into(),
                    amp.into(),
                    ax.into(),
                    aa.into(),
                    ((aa - amp) / amp).abs().into(),
                    "".into(),
                ]);
            }
            Err(e) => {
                out.failures.push(format!("simulation at detuning {:e}: {e}", p.detuning));
                let nan = Cell::F(f64::NAN);
                c.push(vec![
                    p.detuning.into(),
                    "error".into(),
                    nan.clone(),
                    nan.clone(),
                    nan.clone(),
                    nan.clone(),
                    nan,
                    e.to_string().into(),
                ]);
            }
        }
    }
    out.tables.push(c);
    Ok(out)
}

fn lyapunov_row(t: &mut Table, method: &str, r: &LyapunovResult) {
    t.push(vec![method.into(), r.lambda_max.into(), r.stderr.into(), r.n_renorm.into()]);
}

fn lyapunov(cfg: &RunConfig) -> Result<Outcome> {
    let spec = cfg.lyapunov.spec();
    let init = cfg.initial.state();
    let mut t = Table::new("main", &["method", "lambda_max", "stderr", "n_renorm"]);
    let mut out = Outcome::default();
    let m = cfg.lyapunov.method;
    if matches!(m, LyapunovMethod::Tangent | LyapunovMethod::Both) {
        let r = max_lyapunov_with(&cfg.params, init, &spec, cfg.integration.tolerances)?;
        lyapunov_row(&mut t, "tangent", &r);
        out.result("tangent", float_value(r.lambda_max));
    }
    if matches!(m, LyapunovMethod::Twin | LyapunovMethod::Both) {
        let r = max_lyapunov_twin(&cfg.params, init, &spec, cfg.lyapunov.separation)?;
        lyapunov_row(&mut t, "twin", &r);
        out.result("twin", float_value(r.lambda_max));
    }
    out.result("chaos_threshold", float_value(cfg.classify.chaos_threshold));
    out.tables.push(t);
    Ok(out)
}

fn kind_code(kind: AttractorKind) -> i64 {
    match kind {
        AttractorKind::Stationary => 0,
        AttractorKind::Periodic(n) => n as i64,
        AttractorKind::Chaotic => 99,
        AttractorKind::Undecided => -1,
    }
}

fn bifurcation(cfg: &RunConfig) -> Result<Outcome> {
    let grid = grid(cfg);
    let diagram = bifurcation_sweep(&cfg.params, &grid, &cfg.classify_spec(), cfg.classify.start)?;
    let mut out = Outcome::default();
    let mut maxima = Table::new("main", &["detuning", "start", "class", "period", "lambda_max", "maximum"]);
    let mut summary = Table::new(
        "points",
        &["detuning", "start", "class", "period", "lambda_max", "lambda_stderr", "n_maxima", "error"],
    );
    for p in &diagram.points {
        for (start, res) in [("warm", &p.warm), ("cold", &p.cold)] {
            match res {
                Ok(SweepOutcome { class, maxima: xs }) => {
                    let label = class.kind.label();
                    let code = kind_code(class.kind);
                    let lambda = class.lyapunov.lambda_max;
                    summary.push(vec![
                        p.detuning.into(),
                        start.into(),
                        label.clone().into(),
                        code.into(),
                        lambda.into(),
                        class.lyapunov.stderr.into(),
                        xs.len().into(),
                        "".into(),
                    ]);
                    // periodic orbits are drawn with their distinct maxima
                    let drawn = if class.kind.period().is_some() { &class.maxima } else { xs };
                    if drawn.is_empty() {
                        maxima.push(vec![p.detuning.into(), start.into(), label.clone().into(), code.into(), lambda.into(), f64::NAN.into()]);
                    }
                    for &x in drawn {
                        maxima.push(vec![p.detuning.into(), start.into(), label.clone().into(), code.into(), lambda.into(), x.into()]);
                    }
                }
                Err(e) if e == "not run" => {}
                Err(e) => {
                    out.failures.push(format!("{start} start at detuning {:e}: {e}", p.detuning));
                    summary.push(vec![
                        p.detuning.into(),
                        start.into(),
                        "error".into(),
                        Cell::I(-2),
                        f64::NAN.into(),
                        f64::NAN.into(),
                        Cell::I(0),
                        e.clone().into(),
                    ]);
                }
            }
        }
    }
    let chaotic: Vec<f64> = diagram
        .points
        .iter()
        .filter(|p| p.primary().is_some_and(|o| o.class.kind == AttractorKind::Chaotic))
        .map(|p| p.detuning)
        .collect();
    out.result("grid_points", grid.len());
    out.result("chaotic_points", chaotic.len());
    if let (Some(lo), Some(hi)) = (
        chaotic.iter().copied().reduce(f64::min),
        chaotic.iter().copied().reduce(f64::max),
    ) {
        out.result("chaotic_range", Value::Array(vec![float_value(lo), float_value(hi)]));
    }
    out.tables.push(maxima);
    out.tables.push(summary);
    Ok(out)
}

fn phase_diagram(cfg: &RunConfig) -> Result<Outcome> {
    let deltas = grid(cfg);
    let pumps = cfg.pump_grid.as_ref().map(|g| g.points()).unwrap_or_default();
    let diagram = phase_diagram_grid(&cfg.params, &deltas, &pumps, &cfg.classify_spec())?;
    let mut out = Outcome::default();
    let mut t = Table::new("main", &["pump", "detuning", "class", "code", "lambda_max", "error"]);
    for c in &diagram.cells {
        if let Some(e) = &c.error {
            out.failures.push(format!("cell (detuning {:e}, pump {:e}): {e}", c.detuning, c.pump));
        }
        t.push(vec![
            c.pump.into(),
            c.detuning.into(),
            if c.error.is_some() { "error".to_string() } else { c.kind.label() }.into(),
            kind_code(c.kind).into(),
            c.lambda_max.into(),
            c.error.clone().unwrap_or_default().into(),
        ]);
    }
    let mut b = Table::new("boundaries", &["boundary", "line", "detuning", "pump"]);
    for (name, lines) in [("pdb", &diagram.pdb_boundary), ("chaos", &diagram.chaos_boundary)] {
        for (k, line) in lines.iter().enumerate() {
            for &(d, p) in line {
                b.push(vec![name.into(), k.into(), d.into(), p.into()]);
            }
        }
    }
    let onset = |pred: &dyn Fn(AttractorKind) -> bool| {
        diagram
            .cells
            .iter()
            .filter(|c| c.error.is_none() && pred(c.kind))
            .map(|c| c.pump)
            .reduce(f64::min)
            .map_or(Value::Null, float_value)
    };
    out.result(
        "lowest_pump_beyond_pdb",
        onset(&|k| k == AttractorKind::Chaotic || k.period().is_some_and(|n| n >= 2)),
    );
    out.result("lowest_pump_chaotic", onset(&|k| k == AttractorKind::Chaotic));
    out.tables.push(t);
    out.tables.push(b);
    Ok(out)
}

fn order_json(order: SubharmonicOrder) -> Value {
    match order {
        SubharmonicOrder::Order(n) => Value::from(n),
        SubharmonicOrder::Continuous => Value::from("continuous"),
    }
}

fn spectrum(cfg: &RunConfig) -> Result<Outcome> {
    let s = &cfg.spectrum;
    let transient = s.transient_periods as f64 * TWO_PI;
    let span = (0.0, transient + s.n_periods as f64 * TWO_PI);
    let traj = integrate_sc_with(
        cfg.initial.state(),
        &cfg.params,
        span,
        Sampling::per_period(s.samples_per_period),
        cfg.integration.tolerances,
        transient,
    )?;
    let ps = power_spectrum(&traj, &s.spec())?;
    let lines = spectral_lines(&ps, s.threshold);
    let order = detect_subharmonic_order(&ps, s.threshold);
    let mut t = Table::new("main", &["frequency", "power"]);
    for (&f, &p) in ps.frequencies.iter().zip(&ps.power) {
        t.push(vec![f.into(), p.into()]);
    }
    let mut l = Table::new("lines", &["frequency", "power"]);
    for line in &lines {
        l.push(vec![line.frequency.into(), line.power.into()]);
    }
    let mut out = Outcome::default();
    out.result("order", order_json(order));
    out.result("fundamental", fundamental(&lines).map_or(Value::Null, float_value));
    out.result("resolution", float_value(ps.resolution));
    out.tables.push(t);
    out.tables.push(l);
    Ok(out)
}

/// Semi-classical run from the origin sampled like the quantum records.
fn sc_reference(cfg: &RunConfig) -> Result<ScTrajectory> {
    integrate_sc_with(
        ScState::ORIGIN,
        &cfg.params,
        cfg.qsd.span(),
        Sampling::per_period(cfg.qsd.samples_per_period),
        cfg.integration.tolerances,
        0.0,
    )
}

/// Configured cutoffs, or cutoffs sized from the semi-classical amplitudes.
fn qsd_truncation(cfg: &RunConfig, sc: &ScTrajectory) -> Result<HilbertTruncation> {
    if let Some(t) = cfg.qsd.truncation() {
        return Ok(t);
    }
    let c = derive_couplings(&cfg.params)?;
    let (amax, bmax) = sc
        .states
        .iter()
        .fold((0.0f64, 0.0f64), |(a, b), s| (a.max(s.alpha.norm()), b.max(s.beta.norm())));
    Ok(suggest_truncation(2.0 * c.alpha_l * amax, bmax / c.g0))
}

fn truncation_json(t: HilbertTruncation) -> Value {
    serde_json::json!({ "n_cav": t.n_cav, "n_mech": t.n_mech })
}

fn periodicity_json(p: Periodicity) -> Value {
    match p {
        Periodicity::Periodic(n) => Value::from(n),
        Periodicity::Aperiodic => Value::from("aperiodic"),
    }
}

fn qsd_trajectory(cfg: &RunConfig) -> Result<Outcome> {
    let q = &cfg.qsd;
    let sc = sc_reference(cfg)?;
    let trunc = qsd_truncation(cfg, &sc)?;
    let spec = q.spec();
    let ops = build_operators_with_budget(&cfg.params, trunc, q.dim_budget)?;
    let rec = run_trajectory_from(&ops, &QuantumState::vacuum(trunc), q.span(), &spec, cfg.seed, q.index)?;
    let mut t = Table::new(
        "main",
        &["tau", "re_a", "im_a", "re_b", "im_b", "n_cav", "n_mech", "leakage", "x", "p", "sc_x"],
    );
    for (k, (&tau, o)) in rec.times.iter().zip(&rec.observables).enumerate() {
        let r = &rec.rescaled[k];
        let sc_x = sc.states.get(k).map_or(f64::NAN, |s| s.coords().x);
        t.push(vec![
            tau.into(),
            o.a.re.into(),
            o.a.im.into(),
            o.b.re.into(),
            o.b.im.into(),
            o.n_cav.into(),
            o.n_mech.into(),
            rec.leakage[k].into(),
            r.x.into(),
            r.p.into(),
            sc_x.into(),
        ]);
    }
    let mut out = Outcome::default();
    out.result("truncation", truncation_json(trunc));
    out.result("dt", float_value(spec.dt()));
    out.result("max_leakage", float_value(rec.max_leakage));
    out.result("stream_index", rec.index);
    if q.audit {
        let dx = truncation_audit(&cfg.params, trunc, q.span(), &spec, cfg.seed)?;
        out.result("audit_max_dx", float_value(dx));
    }
    out.tables.push(t);
    let section = stroboscopic_section(&rec, q.discard_periods).unwrap_or_default();
    out.tables.push(section_table(&section, q.discard_periods));
    Ok(out)
}

fn qsd_ensemble(cfg: &RunConfig) -> Result<Outcome> {
    let q = &cfg.qsd;
    let sc = sc_reference(cfg)?;
    let trunc = qsd_truncation(cfg, &sc)?;
    let spec = q.spec();
    let ops = build_operators_with_budget(&cfg.params, trunc, q.dim_budget)?;
    let ens = run_ensemble_from(&ops, &QuantumState::vacuum(trunc), q.span(), &spec, q.n_traj, cfg.seed)?;
    let mut cols = vec!["tau"];
    let names = [
        ("a_re", "a_re_se"),
        ("a_im", "a_im_se"),
        ("b_re", "b_re_se"),
        ("b_im", "b_im_se"),
        ("n_cav", "n_cav_se"),
        ("n_mech", "n_mech_se"),
        ("x", "x_se"),
        ("p", "p_se"),
    ];
    for (m, s) in &names {
        cols.push(m);
        cols.push(s);
    }
    cols.push("sc_x");
    cols.push("sc_p");
    let mut t = Table::new("main", &cols);
    for (k, (&tau, m)) in ens.times.iter().zip(&ens.moments).enumerate() {
        let mut row = vec![Cell::F(tau)];
        for (_, mean, se) in m.components() {
            row.push(mean.into());
            row.push(se.into());
        }
        let c = sc.states.get(k).map(|s| s.coords());
        row.push(c.map_or(f64::NAN, |c| c.x).into());
        row.push(c.map_or(f64::NAN, |c| c.p).into());
        t.push(row);
    }
    let per = q.samples_per_period;
    let skip = (q.discard_periods * per).min(ens.times.len());
    let sc_x: Vec<f64> = sc.positions();
    let mut out = Outcome::default();
    out.result("n_traj", ens.n_traj);
    out.result("truncation", truncation_json(trunc));
    out.result("dt", float_value(spec.dt()));
    out.result("max_leakage", float_value(ens.max_leakage));
    out.result("ensemble_period", periodicity_json(series_periodicity(&ens.mean_x()[skip..])));
    out.result("sc_period", periodicity_json(series_periodicity(&sc_x[skip.min(sc_x.len())..])));
    out.tables.push(t);
    Ok(out)
}

fn oracle_check(cfg: &RunConfig) -> Result<Outcome> {
    let q = &cfg.qsd;
    let (nc, nm) = ORACLE_DEFAULT_TRUNCATION;
    let trunc = q.truncation().unwrap_or(HilbertTruncation::new(nc, nm));
    let spec = q.spec();
    let ops = build_operators_with_budget(&cfg.params, trunc, q.dim_budget)?;
    let init = QuantumState::vacuum(trunc);
    let ens = run_ensemble_from(&ops, &init, q.span(), &spec, q.n_traj, cfg.seed)?;
    let oracle = master_equation_oracle(&ops, &init, q.span(), &spec)?;
    if oracle.times.len() != ens.times.len() {
        return Err(Error::InvalidParameter {
            name: "qsd",
            reason: "oracle and ensemble sample grids differ".into(),
        });
    }
    let mut t = Table::new("main", &["tau", "observable", "qsd_mean", "qsd_stderr", "oracle", "z"]);
    let mut max_z: f64 = 0.0;
    let mut outside = 0usize;
    let mut checked = 0usize;
    for (k, (&tau, m)) in ens.times.iter().zip(&ens.moments).enumerate() {
        let o = &oracle.observables[k];
        let exact = [o.a.re, o.a.im, o.b.re, o.b.im, o.n_cav, o.n_mech];
        for ((name, mean, se), ex) in m.components().into_iter().zip(exact) {
            let z = if se > 0.0 { (mean - ex) / se } else if mean == ex { 0.0 } else { f64::INFINITY };
            if k > 0 {
                checked += 1;
                max_z = max_z.max(z.abs());
                if z.abs() > 3.0 {
                    outside += 1;
                }
            }
            t.push(vec![tau.into(), name.into(), mean.into(), se.into(), ex.into(), z.into()]);
        }
    }
    let mut out = Outcome::default();
    out.result("truncation", truncation_json(trunc));
    out.result("n_traj", ens.n_traj);
    out.result("max_abs_z", float_value(max_z));
    out.result("outside_3_sigma", outside);
    out.result("checked", checked);
    out.result("max_leakage", float_value(ens.max_leakage));
    out.result("oracle_max_trace_error", float_value(oracle.max_trace_error));
    out.result("oracle_min_eigenvalue", float_value(oracle.min_eigenvalue));
    out.tables.push(t);
    Ok(out)
}

/// Process exit code of a fatal error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidParameter { .. } | Error::UndefinedCoupling { .. } | Error::ClassicalLimit => 3,
        Error::StepUnderflow { .. } | Error::Divergence { .. } | Error::TooManySteps { .. } | Error::NormCollapse { .. } => 4,
        Error::Truncation { .. } | Error::Leakage { .. } | Error::DimensionBudget { .. } => 5,
        Error::TooFewSamples { .. } | Error::NonUniformSampling | Error::CadenceMismatch { .. } => 7,
        Error::Trajectory { source, .. } => exit_code(source),
    }
}
