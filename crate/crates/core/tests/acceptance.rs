//! End-to-end acceptance checks. Every criterion prints one `PASS` or `FAIL`
//! line; the test fails if any criterion fails.
//!
//! Run with `cargo test -p ctxrnn --test acceptance`.

use std::io::Write;
use std::time::Instant;

use ctxrnn::config::{ContextMode, TrainConfig};
use ctxrnn::context::{context_conv_forward, modulate, ConvShape, ConvStack, Spectrum};
use ctxrnn::data::{postprocess, Coupling, preprocess_window, synth_generate, SeriesPanel, SynthSpec};
use ctxrnn::es::{es_init, EsSnapshot, TapeEs};
use ctxrnn::eval::{ablate, corr, rse};
use ctxrnn::forecaster::{predict, sequence_loss, total_loss, train, train_model, write_forecast_csv, pinball, Quantiles};
use ctxrnn::model::Model;
use ctxrnn::params::{Bound, ParamStore};
use ctxrnn::select::{build_context_map, shortlist_size};
use ctxrnn::tensor::{grad_check, grad_check_sampled, sigmoid, FftPlan, Padding, Tape, Tensor, TensorError, Var};
use ctxrnn::wdrnn::{drnn_cell_forward, wdrnn_cell_forward, CellShape, CellState, CellVars, LayerShape, LayerState, LayerVars};
use ctxrnn::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<(bool, String), Error>;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(r: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| r.random_range(lo..hi)).collect()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// `sum(v * w)` with fixed, uneven weights so every output matters.
fn weighted_sum(tape: &mut Tape, v: Var) -> Result<Var, TensorError> {
    let n = tape.numel(v);
    let w: Vec<f64> = (0..n).map(|i| 0.3 + ((i * 7 + 3) % 11) as f64 / 7.0).collect();
    let w = tape.constant(Tensor::new(tape.shape(v).to_vec(), w)?);
    let p = tape.mul(v, w)?;
    tape.sum(p)
}

type Probe = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>>;

fn probe(f: impl Fn(&mut Tape, &[Var]) -> Result<Var, TensorError> + 'static) -> Probe {
    Box::new(f)
}

fn primitive_probes() -> Vec<(&'static str, Probe, Vec<Tensor>)> {
    let mut r = rng(11);
    let v = |r: &mut ChaCha8Rng, n: usize| Tensor::vector(uniform(r, n, -1.5, 1.5));
    let away_from_zero: Vec<f64> = uniform(&mut r, 6, 0.2, 1.5)
        .iter()
        .enumerate()
        .map(|(i, x)| if i % 2 == 0 { *x } else { -x })
        .collect();
    let positive = Tensor::vector(uniform(&mut r, 6, 0.3, 3.0));
    let mat = |r: &mut ChaCha8Rng, m: usize, n: usize| Tensor::matrix(m, n, uniform(r, m * n, -1.0, 1.0)).unwrap();
    let plan = FftPlan::new(8);
    let x8: Vec<f64> = (0..8).map(|i| (i as f64 * 0.9).sin() + 0.1 * i as f64).collect();
    let chan = |r: &mut ChaCha8Rng, c: usize, l: usize| Tensor::new(vec![c, l], uniform(r, c * l, -1.0, 1.0)).unwrap();
    vec![
        ("add", probe(|t, p| { let y = t.add(p[0], p[1])?; weighted_sum(t, y) }), vec![v(&mut r, 5), v(&mut r, 5)]),
        ("add-broadcast", probe(|t, p| { let y = t.add(p[0], p[1])?; weighted_sum(t, y) }), vec![v(&mut r, 5), v(&mut r, 1)]),
        ("sub", probe(|t, p| { let y = t.sub(p[0], p[1])?; weighted_sum(t, y) }), vec![v(&mut r, 5), v(&mut r, 5)]),
        ("mul", probe(|t, p| { let y = t.mul(p[0], p[1])?; weighted_sum(t, y) }), vec![v(&mut r, 5), v(&mut r, 5)]),
        ("div", probe(|t, p| { let y = t.div(p[0], p[1])?; weighted_sum(t, y) }), vec![v(&mut r, 6), Tensor::vector(away_from_zero.clone())]),
        ("sigmoid", probe(|t, p| { let y = t.sigmoid(p[0])?; weighted_sum(t, y) }), vec![v(&mut r, 6)]),
        ("tanh", probe(|t, p| { let y = t.tanh(p[0])?; weighted_sum(t, y) }), vec![v(&mut r, 6)]),
        ("exp", probe(|t, p| { let y = t.exp(p[0])?; weighted_sum(t, y) }), vec![v(&mut r, 6)]),
        ("log", probe(|t, p| { let y = t.log(p[0])?; weighted_sum(t, y) }), vec![positive]),
        ("relu", probe(|t, p| { let y = t.relu(p[0])?; weighted_sum(t, y) }), vec![Tensor::vector(away_from_zero.clone())]),
        ("clamp", probe(|t, p| { let y = t.clamp(p[0], -0.1, 0.1)?; weighted_sum(t, y) }), vec![Tensor::vector(vec![-0.05, 0.02, 0.5, -0.7, 0.09, 1.2])]),
        ("affine", probe(|t, p| { let y = t.affine(p[0], -1.7, 0.4)?; weighted_sum(t, y) }), vec![v(&mut r, 4)]),
        ("one-minus", probe(|t, p| { let y = t.one_minus(p[0])?; weighted_sum(t, y) }), vec![v(&mut r, 4)]),
        ("matvec", probe(|t, p| { let y = t.matmul(p[0], p[1])?; weighted_sum(t, y) }), vec![mat(&mut r, 4, 3), v(&mut r, 3)]),
        ("matmul", probe(|t, p| { let y = t.matmul(p[0], p[1])?; weighted_sum(t, y) }), vec![mat(&mut r, 3, 4), mat(&mut r, 4, 2)]),
        ("concat", probe(|t, p| { let y = t.concat(&[p[0], p[1], p[0]])?; weighted_sum(t, y) }), vec![v(&mut r, 2), v(&mut r, 3)]),
        ("slice", probe(|t, p| { let y = t.slice(p[0], 2, 3)?; weighted_sum(t, y) }), vec![v(&mut r, 6)]),
        ("reshape", probe(|t, p| { let y = t.reshape(p[0], &[2, 3])?; weighted_sum(t, y) }), vec![v(&mut r, 6)]),
        ("mean", probe(|t, p| { let y = t.mul(p[0], p[0])?; t.mean(y) }), vec![v(&mut r, 6)]),
        ("sum", probe(|t, p| { let y = t.mul(p[0], p[0])?; t.sum(y) }), vec![v(&mut r, 6)]),
        ("depthwise-same", probe(|t, p| { let y = t.conv1d_depthwise(p[0], p[1], Padding::Same)?; weighted_sum(t, y) }), vec![chan(&mut r, 2, 7), chan(&mut r, 2, 3)]),
        ("depthwise-valid", probe(|t, p| { let y = t.conv1d_depthwise(p[0], p[1], Padding::Valid)?; weighted_sum(t, y) }), vec![chan(&mut r, 2, 7), chan(&mut r, 2, 4)]),
        ("pointwise", probe(|t, p| { let y = t.conv1d_pointwise(p[0], p[1])?; weighted_sum(t, y) }), vec![chan(&mut r, 3, 5), chan(&mut r, 2, 3)]),
        ("spectrum", probe(move |t, p| { let y = t.spectrum(p[0], &plan)?; weighted_sum(t, y) }), vec![Tensor::vector(x8)]),
    ]
}

fn es_probe() -> Result<f64, Error> {
    let st = es_init(&[4.0, 6.0, 5.0, 7.0, 4.5, 6.5], 3)?;
    let z = [5.5, 6.5, 4.5, 7.0, 6.0, 5.0, 6.2];
    grad_check::<_, Error>(
        |tape, p| {
            let mut es = TapeEs::from_snapshot(tape, &EsSnapshot::from_state(&st), 4);
            for (k, &v) in z.iter().enumerate() {
                let da = tape.slice(p[0], k, 1)?;
                let db = tape.slice(p[1], k, 1)?;
                let ia = tape.slice(p[2], 0, 1)?;
                let ib = tape.slice(p[2], 1, 1)?;
                es.step(tape, Some(v), ia, ib, Some(da), Some(db))?;
            }
            let up = es.upcoming(5);
            let up = tape.concat(&up)?;
            let hist: Vec<Var> = es.history().iter().copied().collect();
            let hist = tape.concat(&hist)?;
            let a = weighted_sum(tape, up)?;
            let b = weighted_sum(tape, hist)?;
            let s = tape.add(a, b)?;
            Ok(tape.add(es.level(), s)?)
        },
        &[
            Tensor::vector(vec![0.3, -0.4, 1.2, 0.0, -2.0, 0.7, 0.1]),
            Tensor::vector(vec![-0.1, 0.8, 0.2, -1.0, 0.5, 0.0, -0.3]),
            Tensor::vector(vec![-2.0, -1.5]),
        ],
        1e-6,
    )
}

fn cell_probe() -> Result<f64, Error> {
    let shape = CellShape { input: 3, s_m: 2, s_h: 3 };
    let mut store = ParamStore::new();
    shape.init(&mut store, "c", &mut rng(2))?;
    let mut r = rng(3);
    for v in store.get_mut("c.b").unwrap().values_mut() {
        *v = r.random::<f64>() - 0.5;
    }
    let xs: Vec<Vec<f64>> = (0..6).map(|_| uniform(&mut r, 3, -1.0, 1.0)).collect();
    let params: Vec<Tensor> = store.iter().map(|(_, t)| t.clone()).collect();
    grad_check::<_, Error>(
        |tape, v| {
            let p = CellVars { shape, w: v[0], v: v[1], u: v[2], b: v[3] };
            let mut st = CellState::zeros(tape, 2, shape)?;
            let mut total = tape.scalar(0.0);
            for x in &xs {
                let xv = tape.constant(Tensor::vector(x.clone()));
                let out = drnn_cell_forward(tape, xv, &mut st, &p)?;
                let m = weighted_sum(tape, out.m.unwrap())?;
                let h = weighted_sum(tape, out.h)?;
                let s = tape.add(m, h)?;
                total = tape.add(total, s)?;
            }
            Ok(total)
        },
        &params,
        1e-6,
    )
}

fn conv_probe() -> Result<f64, Error> {
    let shape = ConvShape { window: 8, slots: 2, channels: 3, kernel: 3 };
    let mut store = ParamStore::new();
    shape.init(&mut store, "ctx", &mut rng(4))?;
    for v in store.get_mut("ctx.bias").unwrap().values_mut() {
        *v = 0.1;
    }
    let params: Vec<Tensor> = store.iter().map(|(_, t)| t.clone()).collect();
    let x: Vec<f64> = (0..8).map(|i| (i as f64 * 1.3).sin() * 0.5).collect();
    let sp = Spectrum::new(8)?;
    grad_check::<_, Error>(
        |tape, v| {
            let p = ConvStack { dw1: v[0], pw1: v[1], res1: v[2], dw2: v[3], pw2: v[4], reduce: v[5], bias: v[6] };
            let xv = tape.constant(Tensor::vector(x.clone()));
            let st = sp.features_on_tape(tape, xv)?;
            let out = context_conv_forward(tape, st, &p)?;
            Ok(weighted_sum(tape, out)?)
        },
        &params,
        1e-6,
    )
}

fn tiny_config(mode: ContextMode) -> TrainConfig {
    TrainConfig {
        window: 8,
        horizon: 2,
        period: 4,
        dilations: vec![1, 2],
        hidden: 8,
        state_width: 8,
        context_size: 2,
        context_batch: 2,
        conv_channels: 3,
        bptt: 4,
        mode,
        ..TrainConfig::default()
    }
}

fn full_model_probe(mode: ContextMode) -> Result<f64, Error> {
    let c = tiny_config(mode);
    let panel = synth_generate(&SynthSpec::star(3, 40, 2, 0.2, 4), 1)?;
    let m = Model::init(&c, 3, &[0, 1], panel.shift(), 5)?;
    let names: Vec<String> = m.params.names().map(String::from).collect();
    let tensors: Vec<Tensor> = m.params.iter().map(|(_, t)| t.clone()).collect();
    // ten anchors, t = 8..=17
    grad_check_sampled::<_, Error>(
        |tape, vars| {
            let mut s = ParamStore::new();
            for (n, t) in names.iter().zip(&tensors) {
                s.insert(n.clone(), t.clone())?;
            }
            let bound = Bound::from_vars(&s, vars.to_vec())?;
            sequence_loss(tape, &bound, &m, &panel, &[1, 2], 17)
        },
        &tensors,
        1e-4,
        8,
    )
}

fn gradient_suite() -> Outcome {
    let started = Instant::now();
    let mut worst: (f64, String) = (0.0, String::new());
    let mut note = |name: &str, e: f64| {
        if e > worst.0 {
            worst = (e, name.to_string());
        }
    };
    for (name, f, params) in primitive_probes() {
        note(name, grad_check::<_, TensorError>(f, &params, 1e-6)?);
    }
    note("es-step", es_probe()?);
    note("drnn-cell", cell_probe()?);
    note("context-conv", conv_probe()?);
    for mode in [ContextMode::Full, ContextMode::GlobalOnly, ContextMode::None] {
        note(&format!("model-{mode}"), full_model_probe(mode)?);
    }
    let secs = started.elapsed().as_secs_f64();
    Ok((
        worst.0 <= 1e-4 && secs < 60.0,
        format!("max relative error {:.2e} ({}), {secs:.1} s", worst.0, worst.1),
    ))
}

fn analytic_identities() -> Outcome {
    let mut checks: Vec<(&str, bool)> = Vec::new();
    checks.push(("sigmoid(0)", sigmoid(0.0) == 0.5));
    let mut t = Tape::new();
    let z = t.scalar(0.0);
    let s = t.sigmoid(z)?;
    checks.push(("tape sigmoid(0)", t.value(s)[0] == 0.5));

    let mut r = rng(21);
    let mut pin = true;
    for _ in 0..200 {
        let (a, p) = (r.random_range(-5.0..5.0), r.random_range(-5.0..5.0));
        pin &= (pinball(a, p, 0.5)? - 0.5 * f64::abs(a - p)).abs() <= 1e-15;
    }
    checks.push(("pinball(q=0.5)", pin));

    let q = Quantiles { median: 0.48, lower: 0.025, upper: 0.975 };
    let actual = uniform(&mut r, 6, 1.0, 5.0);
    let med = uniform(&mut r, 6, 1.0, 5.0);
    let lo = uniform(&mut r, 6, 0.0, 1.0);
    let hi = uniform(&mut r, 6, 5.0, 9.0);
    let expect: f64 = actual.iter().zip(&med).map(|(a, m)| if a >= m { 0.48 * (a - m) } else { 0.52 * (m - a) }).sum::<f64>() / 6.0;
    checks.push(("total_loss gamma=0", (total_loss(&actual, &med, &lo, &hi, q, 0.0)? - expect).abs() <= 1e-15));

    let mut rt = 0.0f64;
    for _ in 0..100 {
        let zs = uniform(&mut r, 12, 0.5, 50.0);
        let s = uniform(&mut r, 12, 0.5, 2.0);
        let z_bar = zs.iter().sum::<f64>() / 12.0;
        let x = preprocess_window(&zs, z_bar, &s)?;
        let back = postprocess(&x, z_bar, &s)?;
        for (a, b) in zs.iter().zip(&back) {
            rt = rt.max((a - b).abs() / a.abs());
        }
    }
    checks.push(("pre/postprocess roundtrip", rt <= 1e-12));

    let mut st = es_init(&[4.0, 6.0, 5.0, 7.0], 2)?;
    st.alpha_logit = 40.0;
    st.beta_logit = 40.0;
    let (l, s_new) = st.step(9.0, 0.0, 0.0)?;
    checks.push(("alpha -> 1", (l - 9.0).abs() <= 1e-6 && (s_new - 1.0).abs() <= 1e-6));
    let mut st = es_init(&[4.0, 6.0, 5.0, 7.0], 2)?;
    let (l0, s0) = (st.level(), st.seasonal_lookup(0)?);
    st.alpha_logit = -40.0;
    st.beta_logit = -40.0;
    let (l, s_new) = st.step(9.0, 0.0, 0.0)?;
    checks.push(("alpha -> 0", (l - l0).abs() <= 1e-6 && (s_new - s0).abs() <= 1e-6));

    let mut t = Tape::new();
    let rv = uniform(&mut r, 6, -3.0, 3.0);
    let rvar = t.constant(Tensor::vector(rv.clone()));
    let ones = t.constant(Tensor::filled(&[6], 1.0));
    let m = modulate(&mut t, rvar, ones)?;
    let bitwise = t.value(m).iter().zip(&rv).all(|(a, b)| a.to_bits() == b.to_bits());
    checks.push(("modulate by ones", bitwise));

    checks.push(("unit weighting", unit_weighting_is_identity()?));

    let failed: Vec<&str> = checks.iter().filter(|(_, ok)| !ok).map(|(n, _)| *n).collect();
    Ok((
        failed.is_empty(),
        if failed.is_empty() { format!("{} identities hold", checks.len()) } else { format!("failed: {}", failed.join(", ")) },
    ))
}

/// A bottom cell with all-zero parameters emits `m = 0`, so the top cell
/// must see `exp(0) * x = x` exactly.
fn unit_weighting_is_identity() -> Result<bool, Error> {
    let shape = LayerShape { input: 4, hidden: 5, s_h: 3 };
    let mut store = ParamStore::new();
    shape.top().init(&mut store, "top", &mut rng(5))?;
    let mut tape = Tape::new();
    let b = store.bind(&mut tape);
    let top = CellVars::bind(&b, "top", shape.top())?;
    let bs = shape.bottom();
    let zero = |tape: &mut Tape, r: usize, c: usize| tape.constant(Tensor::zeros(&[r, c]));
    let bottom = CellVars {
        shape: bs,
        w: zero(&mut tape, 4 * bs.width(), bs.input),
        v: zero(&mut tape, 4 * bs.width(), bs.s_h),
        u: zero(&mut tape, 4 * bs.width(), bs.s_h),
        b: tape.constant(Tensor::zeros(&[4 * bs.width()])),
    };
    let lv = LayerVars { bottom, top };
    let mut weighted = LayerState { bottom: CellState::zeros(&mut tape, 1, bs)?, top: CellState::zeros(&mut tape, 1, shape.top())? };
    let mut plain = CellState::zeros(&mut tape, 1, shape.top())?;
    let mut r = rng(6);
    for _ in 0..5 {
        let x = tape.constant(Tensor::vector(uniform(&mut r, 4, -2.0, 2.0)));
        let y = wdrnn_cell_forward(&mut tape, x, &mut weighted, &lv)?;
        let h = drnn_cell_forward(&mut tape, x, &mut plain, &top)?.h;
        if tape.value(y) != tape.value(h) {
            return Ok(false);
        }
    }
    Ok(true)
}

fn fft_properties() -> Outcome {
    let mut r = rng(31);
    let mut parseval = 0.0f64;
    let mut magnitude = 0.0f64;
    for i in 0..100 {
        let w = [8, 24, 31, 168][i % 4];
        let x = uniform(&mut r, w, -10.0, 10.0);
        let sp = Spectrum::new(w)?;
        let ch = sp.spectral_channels(&x)?;
        let energy: f64 = x.iter().map(|v| v * v).sum();
        let spec: f64 = (0..w).map(|k| ch[2 * w + k].powi(2)).sum::<f64>() / w as f64;
        parseval = parseval.max((energy - spec).abs() / energy);
        for k in 0..w {
            let (re, im, mag, ph) = (ch[k], ch[w + k], ch[2 * w + k], ch[3 * w + k]);
            let scale = mag.max(1.0);
            magnitude = magnitude.max((mag * mag - (re * re + im * im)).abs() / (scale * scale));
            magnitude = magnitude.max((mag * ph.cos() - re).abs() / scale).max((mag * ph.sin() - im).abs() / scale);
        }
    }
    let mut dc = 0.0f64;
    for c in [0.5, 3.0, -7.25] {
        for w in [8, 24] {
            let ch = Spectrum::new(w)?.spectral_channels(&vec![c; w])?;
            dc = dc.max((ch[0] - c * w as f64).abs());
            for k in 1..w {
                dc = dc.max(ch[2 * w + k].abs() / w as f64);
            }
            dc = dc.max(ch[w].abs());
        }
    }
    Ok((
        parseval <= 1e-8 && dc <= 1e-9 && magnitude <= 1e-12,
        format!("Parseval {parseval:.1e}, DC leakage {dc:.1e}, magnitude/phase {magnitude:.1e}"),
    ))
}

fn selection_oracle() -> Outcome {
    let (n, s) = (10, 3);
    let mut hits = 0;
    let mut max_tests = 0;
    for seed in 0..10 {
        // one lag-1 pair among otherwise independent series
        let mut spec = SynthSpec::star(n, 2000, 1, 0.1, 24);
        spec.couplings = vec![Coupling { driver: 0, driven: 1, weight: 1.0 }];
        let panel = synth_generate(&spec, seed)?;
        let sel = build_context_map(&panel, s, 5, 4)?;
        if sel.map.per_target[&1].contains(&0) {
            hits += 1;
        }
        max_tests = max_tests.max(sel.granger.tests);
    }
    let budget = n * shortlist_size(s);
    Ok((
        hits >= 9 && max_tests <= budget,
        format!("driver in top-{s} for {hits}/10 seeds, at most {max_tests} Granger tests (budget {budget})"),
    ))
}

fn overfit() -> Outcome {
    let started = Instant::now();
    let panel = synth_generate(&SynthSpec::star(4, 2000, 1, 0.01, 24), 0)?;
    let c = TrainConfig {
        window: 24,
        horizon: 4,
        period: 24,
        dilations: vec![1, 4],
        hidden: 16,
        state_width: 8,
        context_batch: 2,
        conv_channels: 4,
        bptt: 24,
        ..TrainConfig::default()
    };
    let (_, log) = train_model(&panel, &[0, 1], &c, 0)?;
    let first = log.epochs[0].train_loss;
    let last = log.epochs.last().unwrap().train_loss;
    let secs = started.elapsed().as_secs_f64();
    Ok((
        log.epochs.len() == 11 && last <= 0.2 * first && secs < 300.0,
        format!("epoch 1 loss {first:.4}, epoch {} loss {last:.4} ({:.0}%), {secs:.0} s", log.epochs.len(), 100.0 * last / first),
    ))
}

/// Two drivers, each leading its own group of series by the horizon.
fn coupled_panel(seed: u64) -> Result<SeriesPanel, Error> {
    synth_generate(&SynthSpec::grouped(6, 2, 1500, 4, 0.5, 24), seed)
}

fn ablation_direction() -> Outcome {
    let mut full = Vec::new();
    let mut none = Vec::new();
    let mut between = 0;
    for seed in 0..5 {
        let panel = coupled_panel(seed)?;
        let ctx = build_context_map(&panel, 1, 2, 4)?.map.global_batch;
        let c = TrainConfig {
            window: 24,
            horizon: 4,
            period: 24,
            dilations: vec![1, 4],
            hidden: 16,
            state_width: 8,
            context_batch: 2,
            conv_channels: 4,
            bptt: 12,
            seed,
            ..TrainConfig::default()
        };
        let r: Vec<f64> = ablate(&panel, &ctx, &c)?.iter().map(|(_, rep)| rep.rse).collect();
        if r[0] <= r[1] && r[1] <= r[2] {
            between += 1;
        }
        full.push(r[0]);
        none.push(r[2]);
    }
    let (mf, mn) = (median(full), median(none));
    Ok((
        mf <= 0.95 * mn && between >= 3,
        format!("median RSE full {mf:.4} vs no-context {mn:.4} (ratio {:.3}), global-only between in {between}/5", mf / mn),
    ))
}

fn linear_scaling() -> Outcome {
    let c = TrainConfig {
        window: 24,
        horizon: 4,
        period: 24,
        dilations: vec![1, 4],
        hidden: 16,
        state_width: 8,
        context_batch: 2,
        conv_channels: 4,
        bptt: 24,
        epochs: 1,
        ..TrainConfig::default()
    };
    let small = synth_generate(&SynthSpec::star(50, 200, 1, 0.1, 24), 0)?;
    let large = synth_generate(&SynthSpec::star(100, 200, 1, 0.1, 24), 0)?;
    let time = |panel: &SeriesPanel, seed: u64| -> Result<f64, Error> {
        let (_, log) = train_model(panel, &[0, 1], &c, seed)?;
        Ok(log.epochs[0].seconds)
    };
    // interleaved so drift in machine load hits both sizes alike
    let (mut r50, mut r100) = (Vec::new(), Vec::new());
    for seed in 0..3 {
        r50.push(time(&small, seed)?);
        r100.push(time(&large, seed)?);
    }
    let (t50, t100) = (median(r50), median(r100));
    Ok((t100 <= 2.5 * t50, format!("epoch at N=50 {t50:.2} s, N=100 {t100:.2} s, ratio {:.2}", t100 / t50)))
}

fn oracle_rse(p: &[Vec<f64>], a: &[Vec<f64>]) -> f64 {
    let cells: Vec<(f64, f64)> = p.iter().zip(a).flat_map(|(pr, ar)| pr.iter().copied().zip(ar.iter().copied())).collect();
    let mean = cells.iter().map(|c| c.1).sum::<f64>() / cells.len() as f64;
    let num: f64 = cells.iter().map(|(x, y)| (y - x).powi(2)).sum();
    let den: f64 = cells.iter().map(|(_, y)| (y - mean).powi(2)).sum();
    (num / den).sqrt()
}

fn oracle_corr(p: &[Vec<f64>], a: &[Vec<f64>]) -> f64 {
    let per: Vec<f64> = p
        .iter()
        .zip(a)
        .map(|(x, y)| {
            let n = x.len() as f64;
            let (sx, sy): (f64, f64) = (x.iter().sum(), y.iter().sum());
            let sxy: f64 = x.iter().zip(y).map(|(u, v)| u * v).sum();
            let sxx: f64 = x.iter().map(|u| u * u).sum();
            let syy: f64 = y.iter().map(|v| v * v).sum();
            (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
        })
        .collect();
    per.iter().sum::<f64>() / per.len() as f64
}

fn metric_fixtures() -> Outcome {
    let mut r = rng(41);
    let mut worst = 0.0f64;
    let mut ok = true;
    for _ in 0..50 {
        let a: Vec<Vec<f64>> = (0..5).map(|_| uniform(&mut r, 20, -5.0, 5.0)).collect();
        let p: Vec<Vec<f64>> = a.iter().map(|row| row.iter().map(|v| v + r.random_range(-2.0..2.0)).collect()).collect();
        worst = worst.max((rse(&p, &a)? - oracle_rse(&p, &a)).abs());
        worst = worst.max((corr(&p, &a)?.value - oracle_corr(&p, &a)).abs());
        ok &= rse(&a, &a)? == 0.0 && (corr(&a, &a)?.value - 1.0).abs() <= 1e-12;
        let m = a.iter().flatten().sum::<f64>() / 100.0;
        let flat: Vec<Vec<f64>> = a.iter().map(|row| vec![m; row.len()]).collect();
        ok &= (rse(&flat, &a)? - 1.0).abs() <= 1e-12;
    }
    Ok((
        ok && worst <= 1e-12,
        format!("perfect/mean fixtures {}, max deviation from brute force {worst:.1e}", if ok { "exact" } else { "wrong" }),
    ))
}

fn determinism() -> Outcome {
    let panel = synth_generate(&SynthSpec::star(3, 240, 1, 0.1, 24), 5)?;
    let c = TrainConfig {
        window: 24,
        horizon: 4,
        period: 24,
        dilations: vec![1, 4],
        hidden: 8,
        state_width: 8,
        context_batch: 2,
        conv_channels: 3,
        bptt: 24,
        epochs: 3,
        ensemble: 2,
        seed: 17,
        ..TrainConfig::default()
    };
    let run = || -> Result<(Vec<u8>, Vec<u8>), Error> {
        let (ens, _) = train(&panel, &[0, 1], &c)?;
        let dir = tempfile::tempdir()?;
        let path = dir.path().join("model.bin");
        ens.save(&path)?;
        let bytes = std::fs::read(&path)?;
        let loaded = ctxrnn::model::Ensemble::load(&path)?;
        let f = predict(&loaded, &panel, panel.len(), &[0, 1, 2])?;
        let mut csv = Vec::new();
        write_forecast_csv(&panel, &f, &mut csv)?;
        Ok((bytes, csv))
    };
    let (m1, f1) = run()?;
    let (m2, f2) = run()?;
    Ok((
        m1 == m2 && f1 == f2,
        format!("model files {} bytes {}, forecast CSVs {} bytes {}", m1.len(), if m1 == m2 { "identical" } else { "differ" }, f1.len(), if f1 == f2 { "identical" } else { "differ" }),
    ))
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("gradient suite", gradient_suite),
        ("analytic identities", analytic_identities),
        ("FFT properties", fft_properties),
        ("context-selection oracle", selection_oracle),
        ("overfit check", overfit),
        ("ablation direction", ablation_direction),
        ("linear scaling", linear_scaling),
        ("metric fixtures", metric_fixtures),
        ("determinism", determinism),
    ];
    let mut failed = Vec::new();
    for (name, run) in criteria {
        let (ok, detail) = match run() {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        // bypasses the harness capture so the verdicts show in plain `cargo test`
        let mut out = std::io::stdout().lock();
        writeln!(out, "{} {name}: {detail}", if ok { "PASS" } else { "FAIL" }).unwrap();
        out.flush().unwrap();
        if !ok {
            failed.push(name);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
