//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit if any fails.

#[path = "../../core/tests/support/mod.rs"]
mod support;

use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::Path;
use std::process::{Child, Command, Stdio};
use std::time::{Duration, Instant};

use anyhow::{bail, ensure, Context, Result};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use makeup_core::datagen::synthetic_portrait;
use makeup_core::encoder::ArchConfig;
use makeup_core::geometry::DEFAULT_FEATHER_SIGMA;
use makeup_core::metrics::{l1, ms_ssim};
use makeup_core::oracle::{oracle_batch, synthetic_instances, SearchConfig, DEFAULT_MAX_EVALS};
use makeup_core::params::{sample_params, ParamDistribution};
use makeup_core::renderer::{profile, render_image, target_mask, ProfileConfig};
use makeup_core::{FaceGeometry, GraphicsParams, ImageBuffer, RenderOptions, Target};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

const SCENES: usize = 20;
const MS_SSIM_SELF_TOL: f64 = 1e-6;
const MS_SSIM_REF_TOL: f64 = 1e-6;
const TRIPLES: usize = 100;
const MIN_PROBES: usize = 20;
const ORACLE_INSTANCES: usize = 20;
const ORACLE_MIN_OPACITY: f64 = 0.3;
const ORACLE_COLOR_TOL: u8 = 5;
const ORACLE_OPACITY_TOL: f64 = 0.05;
const DATASET_SIZE: &str = "2000";
const MAE_MEAN_MAX: f64 = 0.10;
const MAE_COLOR_MAX: f64 = 0.05;
const ROUNDTRIP_L1_MAX: f64 = 0.05;
const PROFILE_SIZE: usize = 256;
const PROFILE_BUDGET_MS: f64 = 33.0;
const EQUIVALENCE_INPUTS: usize = 5;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Result<Outcome> {
    Ok(Outcome {
        pass,
        detail: detail.into(),
    })
}

fn criterion(name: &str, budget: Duration, f: impl FnOnce() -> Result<Outcome>) -> bool {
    let start = Instant::now();
    let result = f();
    let took = start.elapsed();
    let (pass, detail) = match result {
        Ok(o) => (o.pass, o.detail),
        Err(e) => (false, format!("error: {e:#}")),
    };
    let in_time = took <= budget;
    let pass = pass && in_time;
    println!(
        "{} {name}: {detail} [{:.2} s of {} s budget{}]",
        if pass { "PASS" } else { "FAIL" },
        took.as_secs_f64(),
        budget.as_secs(),
        if in_time { "" } else { ", over budget" }
    );
    pass
}

fn makeup(dir: &Path, args: &[&str]) -> Result<Vec<u8>> {
    let out = Command::new(env!("CARGO_BIN_EXE_makeup"))
        .current_dir(dir)
        .args(args)
        .arg("--quiet")
        .output()?;
    if !out.status.success() {
        bail!("makeup {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr).trim());
    }
    Ok(out.stdout)
}

/// A noisy image with random lip and eye polygons.
fn random_scene(rng: &mut ChaCha8Rng) -> (ImageBuffer, FaceGeometry) {
    let (w, h) = (rng.random_range(48..200), rng.random_range(48..200));
    let base: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.1..0.9));
    let img = ImageBuffer::from_fn(w, h, |_, _| std::array::from_fn(|c| base[c] + rng.random_range(-0.1..0.1)));
    let poly = |rng: &mut ChaCha8Rng| {
        let (cx, cy) = (rng.random_range(0.2..0.8) * w as f64, rng.random_range(0.2..0.8) * h as f64);
        let r = rng.random_range(0.05..0.25) * w.min(h) as f64;
        let n = rng.random_range(3..9);
        (0..n)
            .map(|k| {
                let t = std::f64::consts::TAU * k as f64 / n as f64;
                let rr = r * rng.random_range(0.6..1.0);
                [cx + rr * t.cos(), cy + rr * t.sin()]
            })
            .collect::<Vec<_>>()
    };
    let lips = vec![poly(rng)];
    let eyes = vec![poly(rng), poly(rng)];
    (img, FaceGeometry::new(w, h, lips, eyes).unwrap())
}

fn random_target(rng: &mut ChaCha8Rng) -> Target {
    if rng.random_bool(0.5) {
        Target::Lips
    } else {
        Target::Eyes
    }
}

fn renderer_identity() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut identical = 0;
    for _ in 0..SCENES {
        let (img, geom) = random_scene(&mut rng);
        let opts = RenderOptions {
            user_intensity: rng.random_range(0.0..=1.0),
            ..RenderOptions::new(random_target(&mut rng))
        };
        let out = render_image(&img, &geom, &GraphicsParams::zero(), &opts)?;
        identical += (out == img) as usize;
    }
    outcome(identical == SCENES, format!("{identical}/{SCENES} zero-parameter renders bit-identical to the source"))
}

fn renderer_locality() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let params = sample_params(&ParamDistribution::uniform(), SCENES, 202)?;
    let (mut clean, mut outside) = (0, 0);
    for p in &params {
        let (img, geom) = random_scene(&mut rng);
        let opts = RenderOptions {
            user_intensity: rng.random_range(0.2..=1.0),
            ..RenderOptions::new(random_target(&mut rng))
        };
        let out = render_image(&img, &geom, p, &opts)?;
        let mask = target_mask(&geom, opts.target, DEFAULT_FEATHER_SIGMA)?;
        let mut ok = true;
        for y in 0..img.height() {
            for x in 0..img.width() {
                if mask.get(x, y) == 0.0 {
                    outside += 1;
                    ok &= out.get(x, y) == img.get(x, y);
                }
            }
        }
        clean += ok as usize;
    }
    outcome(
        clean == SCENES,
        format!("{clean}/{SCENES} random renders untouched outside the mask ({outside} zero-weight pixels checked)"),
    )
}

fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> ImageBuffer {
    ImageBuffer::from_fn(w, h, |_, _| std::array::from_fn(|_| rng.random::<f32>()))
}

fn metric_oracles() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut self_err: f64 = 0.0;
    for _ in 0..10 {
        let (w, h) = (rng.random_range(11..200), rng.random_range(11..200));
        let a = random_image(&mut rng, w, h);
        self_err = self_err.max((ms_ssim(&a, &a)? - 1.0).abs());
    }
    let mut triangle_ok = 0;
    for _ in 0..TRIPLES {
        let (w, h) = (rng.random_range(1..64), rng.random_range(1..64));
        let [a, b, c] = std::array::from_fn(|_| random_image(&mut rng, w, h));
        // slack for floating-point summation order only
        triangle_ok += (l1(&a, &c)? <= l1(&a, &b)? + l1(&b, &c)? + 1e-12) as usize;
    }
    let mut ref_err: f64 = 0.0;
    let mut prng = ChaCha8Rng::seed_from_u64(2024);
    for (w, h) in support::PAIR_SIZES {
        let (a, b) = support::random_pair(&mut prng, w, h);
        ref_err = ref_err.max((ms_ssim(&a, &b)? - support::direct_ms_ssim::reference(&a, &b)).abs());
    }
    outcome(
        self_err <= MS_SSIM_SELF_TOL && triangle_ok == TRIPLES && ref_err <= MS_SSIM_REF_TOL,
        format!(
            "|ms_ssim(a,a)-1| max {self_err:.1e} on 10 images; triangle inequality {triangle_ok}/{TRIPLES}; \
             direct-formula gap max {ref_err:.1e} on {} pairs",
            support::PAIR_SIZES.len()
        ),
    )
}

fn gradient_check() -> Result<Outcome> {
    let arch = ArchConfig::default();
    let r = support::grad_check::check(&arch, 3, 1);
    let all_kinds = 2 * arch.convs.len() + 4;
    let mut detail = format!(
        "{} weights over {}/{all_kinds} parameter kinds (conv, hidden, head weights and biases), step {:.0e}, worst relative error {:.2e}, {} kink probes resampled",
        r.checked,
        r.kinds.len(),
        support::grad_check::STEP,
        r.worst_rel,
        r.skipped
    );
    if !r.failures.is_empty() {
        detail.push_str(&format!("; {}", r.failures.join("; ")));
    }
    outcome(
        r.failures.is_empty() && r.checked >= MIN_PROBES && r.kinds.len() == all_kinds && r.worst_rel <= support::grad_check::TOLERANCE,
        detail,
    )
}

fn oracle_recovery() -> Result<Outcome> {
    let instances = synthetic_instances(404, ORACLE_INSTANCES, 128, Target::Lips, ORACLE_MIN_OPACITY)?;
    let config = SearchConfig::default();
    ensure!(config.max_evals == DEFAULT_MAX_EVALS && DEFAULT_MAX_EVALS == 2000);
    let records = oracle_batch(&instances, &config)?;
    let (mut ok, mut color_err, mut opacity_err, mut evals) = (0, 0u8, 0.0f64, 0usize);
    for r in &records {
        let ce = (0..3).map(|c| r.truth.color()[c].abs_diff(r.result.params.color()[c])).max().unwrap();
        let oe = (r.truth.opacity() - r.result.params.opacity()).abs();
        color_err = color_err.max(ce);
        opacity_err = opacity_err.max(oe);
        evals = evals.max(r.result.evaluations);
        ok += (ce <= ORACLE_COLOR_TOL && oe <= ORACLE_OPACITY_TOL && r.result.evaluations <= 2000) as usize;
    }
    outcome(
        ok == ORACLE_INSTANCES,
        format!(
            "{ok}/{ORACLE_INSTANCES} recovered; worst color error {color_err}/255, worst opacity error {opacity_err:.4}, most evaluations {evals}"
        ),
    )
}

/// Per-component MAE, mean MAE and round-trip L1.
type RecoveryReport = (Vec<(String, f64)>, f64, f64);

fn parse_recovery(text: &str) -> Result<RecoveryReport> {
    let mut comps = Vec::new();
    let (mut mean, mut roundtrip) = (None, None);
    for line in text.lines().skip(1) {
        if let Some(rest) = line.strip_prefix("# summary") {
            for kv in rest.split('\t').filter(|s| !s.is_empty()) {
                let (k, v) = kv.split_once('=').context("summary field")?;
                match k {
                    "mean_mae" => mean = Some(v.parse()?),
                    "roundtrip_l1" => roundtrip = Some(v.parse()?),
                    _ => {}
                }
            }
        } else {
            let (k, v) = line.split_once('\t').context("component row")?;
            comps.push((k.to_string(), v.parse()?));
        }
    }
    Ok((comps, mean.context("mean_mae")?, roundtrip.context("roundtrip_l1")?))
}

fn encoder_recovery(dir: &Path) -> Result<Outcome> {
    makeup(dir, &["gen-data", "--out", "data", "--n", DATASET_SIZE, "--seed", "7", "--crop-size", "64", "--target", "lips"])?;
    makeup(dir, &["train", "--data", "data", "--out", "model.bin", "--seed", "7", "--threads", "1", "--log", "train.csv"])?;
    let report = String::from_utf8(makeup(dir, &["eval-recovery", "--model", "model.bin", "--data", "data", "--seed", "7"])?)?;
    let (comps, mean, roundtrip) = parse_recovery(&report)?;
    let colors: Vec<f64> = comps.iter().filter(|(k, _)| k.starts_with("color_")).map(|(_, v)| *v).collect();
    ensure!(colors.len() == 3, "expected three color rows");
    // portraits never seen in training, for context only
    makeup(dir, &["gen-data", "--out", "unseen", "--n", "200", "--seed", "99", "--crop-size", "64"])?;
    let unseen = String::from_utf8(makeup(dir, &["eval-recovery", "--model", "model.bin", "--data", "unseen", "--split", "all"])?)?;
    let (_, unseen_mean, _) = parse_recovery(&unseen)?;
    let pass = mean < MAE_MEAN_MAX && colors.iter().all(|&c| c < MAE_COLOR_MAX) && roundtrip < ROUNDTRIP_L1_MAX;
    outcome(
        pass,
        format!(
            "held-out MAE {mean:.4} (color {:.4}/{:.4}/{:.4}), round-trip L1 {roundtrip:.4}; unseen-portrait MAE {unseen_mean:.4} (not gated)",
            colors[0], colors[1], colors[2]
        ),
    )
}

fn same_files(a: &Path, b: &Path) -> Result<bool> {
    let mut names_a: Vec<_> = std::fs::read_dir(a)?.map(|e| e.map(|e| e.file_name())).collect::<Result<_, _>>()?;
    let mut names_b: Vec<_> = std::fs::read_dir(b)?.map(|e| e.map(|e| e.file_name())).collect::<Result<_, _>>()?;
    names_a.sort();
    names_b.sort();
    if names_a != names_b {
        return Ok(false);
    }
    for n in names_a {
        let (pa, pb) = (a.join(&n), b.join(&n));
        let same = if pa.is_dir() {
            same_files(&pa, &pb)?
        } else {
            std::fs::read(&pa)? == std::fs::read(&pb)?
        };
        if !same {
            return Ok(false);
        }
    }
    Ok(true)
}

fn write_scene(dir: &Path, name: &str, seed: u64, size: usize, params: Option<&GraphicsParams>) -> Result<()> {
    let (img, geom) = synthetic_portrait(seed, size);
    let img = match params {
        Some(p) => render_image(&img, &geom, p, &RenderOptions::new(Target::Lips))?,
        None => img,
    };
    img.save_png(dir.join(format!("{name}.png")))?;
    std::fs::write(dir.join(format!("{name}.json")), geom.to_json())?;
    Ok(())
}

fn fixed_params() -> Vec<GraphicsParams> {
    [
        (0.9, [190, 20, 50], 1.2, 0.2, 0.4),
        (0.5, [120, 60, 80], 0.3, 0.8, 0.1),
        (0.7, [220, 110, 120], 1.8, 0.05, 0.9),
        (0.35, [90, 30, 40], 0.0, 0.5, 0.0),
        (1.0, [160, 40, 100], 0.7, 0.6, 0.6),
    ]
    .into_iter()
    .map(|(o, c, g, r, f)| GraphicsParams::new(o, c, g, r, f).unwrap())
    .collect()
}

fn determinism(dir: &Path) -> Result<Outcome> {
    makeup(dir, &["gen-data", "--out", "data_again", "--n", DATASET_SIZE, "--seed", "7", "--crop-size", "64", "--target", "lips"])?;
    let gen = same_files(&dir.join("data"), &dir.join("data_again"))?;
    for out in ["short_a.bin", "short_b.bin"] {
        makeup(dir, &["train", "--data", "data", "--out", out, "--epochs", "3", "--seed", "7", "--threads", "1"])?;
    }
    let train = std::fs::read(dir.join("short_a.bin"))? == std::fs::read(dir.join("short_b.bin"))?;
    write_scene(dir, "det_ref", 500, 128, Some(&fixed_params()[0]))?;
    write_scene(dir, "det_src", 501, 128, None)?;
    let est = ["estimate", "--model", "model.bin", "--image", "det_ref.png", "--geometry", "det_ref.json", "--threads", "1"];
    let doc_a = makeup(dir, &est)?;
    let estimate = doc_a == makeup(dir, &est)?;
    std::fs::write(dir.join("det_params.json"), &doc_a)?;
    for out in ["det_a.png", "det_b.png"] {
        makeup(dir, &["render", "--image", "det_src.png", "--geometry", "det_src.json", "--params", "det_params.json", "--out", out])?;
    }
    let render = std::fs::read(dir.join("det_a.png"))? == std::fs::read(dir.join("det_b.png"))?;
    let mark = |b: bool| if b { "identical" } else { "DIFFERENT" };
    outcome(
        gen && train && estimate && render,
        format!(
            "gen-data {}, train {}, estimate {}, render {} across two runs",
            mark(gen),
            mark(train),
            mark(estimate),
            mark(render)
        ),
    )
}

fn throughput() -> Result<Outcome> {
    let frames: Vec<_> = (0..8)
        .map(|i| synthetic_portrait(600 + i, PROFILE_SIZE))
        .collect();
    let params = GraphicsParams::new(0.8, [170, 30, 50], 1.0, 0.3, 0.5)?;
    let config = ProfileConfig::default();
    ensure!(config.warmup == 100 && config.measured == 500);
    let report = profile(&frames, &params, &RenderOptions::new(Target::Lips), config)?;
    let stages: Vec<String> = report.stages.iter().map(|s| format!("{} {:.3}", s.stage, s.mean_ms)).collect();
    let total = report.total();
    outcome(
        total.mean_ms <= PROFILE_BUDGET_MS,
        format!(
            "{PROFILE_SIZE}x{PROFILE_SIZE}, skip {} average {}, single thread; mean ms: {} (p95 total {:.3})",
            report.warmup,
            report.measured,
            stages.join(", "),
            total.p95_ms
        ),
    )
}

struct Server(Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn free_port() -> Result<u16> {
    Ok(TcpListener::bind("127.0.0.1:0")?.local_addr()?.port())
}

/// Minimal HTTP/1.1 exchange; returns status and body.
fn http(port: u16, method: &str, path: &str, body: &[u8]) -> Result<(u16, Vec<u8>)> {
    let mut s = TcpStream::connect(("127.0.0.1", port))?;
    s.set_read_timeout(Some(Duration::from_secs(120)))?;
    write!(
        s,
        "{method} {path} HTTP/1.1\r\nHost: 127.0.0.1\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
        body.len()
    )?;
    s.write_all(body)?;
    let mut raw = Vec::new();
    s.read_to_end(&mut raw)?;
    let split = raw.windows(4).position(|w| w == b"\r\n\r\n").context("no header end")?;
    let head = String::from_utf8_lossy(&raw[..split]).to_string();
    let mut body = raw[split + 4..].to_vec();
    let status: u16 = head.split_whitespace().nth(1).context("status")?.parse()?;
    if head.to_ascii_lowercase().contains("transfer-encoding: chunked") {
        body = dechunk(&body)?;
    }
    Ok((status, body))
}

fn dechunk(mut data: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    loop {
        let eol = data.windows(2).position(|w| w == b"\r\n").context("chunk size")?;
        let size = usize::from_str_radix(std::str::from_utf8(&data[..eol])?.trim(), 16)?;
        if size == 0 {
            return Ok(out);
        }
        out.extend_from_slice(&data[eol + 2..eol + 2 + size]);
        data = &data[eol + 4 + size..];
    }
}

fn service_equivalence(dir: &Path) -> Result<Outcome> {
    let port = free_port()?;
    let child = Command::new(env!("CARGO_BIN_EXE_makeup"))
        .current_dir(dir)
        .args(["serve", "--model", "model.bin", "--port", &port.to_string(), "--threads", "1", "--quiet"])
        .stdout(Stdio::null())
        .spawn()?;
    let _server = Server(child);
    let deadline = Instant::now() + Duration::from_secs(30);
    loop {
        match http(port, "GET", "/health", b"") {
            Ok((200, _)) => break,
            _ if Instant::now() < deadline => std::thread::sleep(Duration::from_millis(100)),
            other => bail!("service did not come up: {:?}", other.map(|r| r.0)),
        }
    }
    let mut equal = 0;
    for (i, p) in fixed_params().iter().enumerate() {
        let size = 96 + 32 * i;
        let (r, s) = (format!("eq_ref{i}"), format!("eq_src{i}"));
        write_scene(dir, &r, 700 + i as u64, size, Some(p))?;
        write_scene(dir, &s, 800 + i as u64, size, None)?;
        let (rp, rj, sp, sj) = (format!("{r}.png"), format!("{r}.json"), format!("{s}.png"), format!("{s}.json"));
        let doc = makeup(dir, &["estimate", "--model", "model.bin", "--image", &rp, "--geometry", &rj])?;
        let params_file = format!("eq_params{i}.json");
        std::fs::write(dir.join(&params_file), &doc)?;
        let out = format!("eq_out{i}.png");
        makeup(dir, &["render", "--image", &sp, "--geometry", &sj, "--params", &params_file, "--out", &out])?;
        let cli_png = std::fs::read(dir.join(&out))?;

        let geometry = |name: &str| -> Result<Value> { Ok(serde_json::from_str(&std::fs::read_to_string(dir.join(name))?)?) };
        let req = json!({"image": B64.encode(std::fs::read(dir.join(&rp))?), "geometry": geometry(&rj)?, "target": "lips"});
        let (status, body) = http(port, "POST", "/estimate", &serde_json::to_vec(&req)?)?;
        ensure!(status == 200, "estimate {i}: {status} {}", String::from_utf8_lossy(&body));
        let resp: Value = serde_json::from_slice(&body)?;
        let req = json!({
            "image": B64.encode(std::fs::read(dir.join(&sp))?),
            "geometry": geometry(&sj)?,
            "params": resp["params"],
            "target": "lips",
            "user_intensity": 1.0,
        });
        let (status, http_png) = http(port, "POST", "/render", &serde_json::to_vec(&req)?)?;
        ensure!(status == 200, "render {i}: {status} {}", String::from_utf8_lossy(&http_png));
        let cli_params = GraphicsParams::from_json(std::str::from_utf8(&doc)?)?;
        let http_params: GraphicsParams = serde_json::from_value(resp["params"].clone())?;
        equal += (cli_png == http_png && cli_params == http_params) as usize;
    }
    outcome(
        equal == EQUIVALENCE_INPUTS,
        format!("{equal}/{EQUIVALENCE_INPUTS} estimate-then-render outputs byte-identical between HTTP and CLI"),
    )
}

fn main() {
    let dir = tempfile::tempdir().expect("temp dir");
    let d = dir.path();
    let results = [
        criterion("renderer identity", Duration::from_secs(1), renderer_identity),
        criterion("renderer locality", Duration::from_secs(1), renderer_locality),
        criterion("metric oracles", Duration::from_secs(30), metric_oracles),
        criterion("gradient check", Duration::from_secs(60), gradient_check),
        criterion("oracle recovery", Duration::from_secs(600), oracle_recovery),
        criterion("encoder recovery", Duration::from_secs(45 * 60), || encoder_recovery(d)),
        criterion("determinism", Duration::from_secs(15 * 60), || determinism(d)),
        criterion("throughput", Duration::from_secs(120), throughput),
        criterion("cli/service equivalence", Duration::from_secs(300), || service_equivalence(d)),
    ];
    let failed = results.iter().filter(|p| !**p).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
