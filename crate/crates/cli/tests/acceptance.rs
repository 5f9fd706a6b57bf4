//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::time::{Duration, Instant};

use leafscan_api::requests::{Channel, RequestPayload};
use leafscan_api::store::RequestStore;
use leafscan_core::checkpoint;
use leafscan_core::dataset::read_annotations;
use leafscan_core::detector::{iou, nms, BBox, Detection};
use leafscan_core::gradcheck_suite::{run_suite, LAYERS};
use leafscan_core::image::{encode_ppm, ImageRgb8};
use leafscan_core::metrics::{confusion, mcc, report, ConfusionMatrix};
use leafscan_core::model::{BackboneConfig, ConvBlock, Model};
use leafscan_core::pipeline::{detect, DetectOptions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn leafscan(args: &[&str], cwd: &Path) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_leafscan"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "leafscan {} exited {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr).trim()
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn field<'a>(stdout: &'a str, key: &str) -> Result<&'a str, String> {
    stdout
        .lines()
        .find_map(|l| l.strip_prefix(key)?.strip_prefix('='))
        .ok_or_else(|| format!("no {key}= in output"))
}

fn seed_kb() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/kb.json")
}

// A1

fn a1() -> Outcome {
    let start = Instant::now();
    let suite = run_suite(20, 0).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    ensure(suite.layers.len() == LAYERS.len(), "missing layers")?;
    let worst = suite.layers.iter().map(|l| l.max_relative_error).fold(0.0, f64::max);
    for l in &suite.layers {
        ensure(l.seeds >= 20, format!("{} ran {} seeds", l.layer, l.seeds))?;
        ensure(l.max_relative_error < 1e-3, format!("{} relative error {:.3e}", l.layer, l.max_relative_error))?;
    }
    ensure(elapsed < Duration::from_secs(60), format!("took {elapsed:?}"))?;
    Ok(format!("7 layers x 20 seeds, worst relative error {worst:.2e}, {:.1}s", elapsed.as_secs_f64()))
}

// A2

/// Per-class counts by walking every individual sample.
fn recount(pairs: &[(usize, usize)], c: usize) -> Vec<[u64; 4]> {
    (0..c)
        .map(|k| {
            let mut tp_fp_fn_tn = [0u64; 4];
            for &(actual, predicted) in pairs {
                let slot = match (actual == k, predicted == k) {
                    (true, true) => 0,
                    (false, true) => 1,
                    (true, false) => 2,
                    (false, false) => 3,
                };
                tp_fp_fn_tn[slot] += 1;
            }
            tp_fp_fn_tn
        })
        .collect()
}

/// Pearson correlation of the one-hot actual and predicted indicator vectors.
fn correlation_mcc(pairs: &[(usize, usize)], c: usize) -> f64 {
    let n = pairs.len() as f64;
    let mean = |pick: &dyn Fn(&(usize, usize)) -> usize, k: usize| {
        pairs.iter().filter(|p| pick(p) == k).count() as f64 / n
    };
    let actual = |p: &(usize, usize)| p.0;
    let predicted = |p: &(usize, usize)| p.1;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for k in 0..c {
        let (mx, my) = (mean(&actual, k), mean(&predicted, k));
        for p in pairs {
            let x = f64::from(u8::from(p.0 == k)) - mx;
            let y = f64::from(u8::from(p.1 == k)) - my;
            sxy += x * y;
            sxx += x * x;
            syy += y * y;
        }
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn close(a: f64, b: f64, what: &str) -> Result<(), String> {
    ensure((a - b).abs() <= 1e-12, format!("{what}: {a} vs {b}"))
}

fn a2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for trial in 0..100 {
        let c = rng.random_range(2..=10);
        let n = rng.random_range(c..=400);
        let pairs: Vec<(usize, usize)> = (0..n)
            .map(|_| {
                let a = rng.random_range(0..c);
                // Mostly right, so the matrices are diagonal-heavy like real ones.
                let p = if rng.random_bool(0.6) { a } else { rng.random_range(0..c) };
                (a, p)
            })
            .collect();
        let (actual, predicted): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
        let cm = confusion(&predicted, &actual, c).map_err(|e| e.to_string())?;
        let labels: Vec<String> = (0..c).map(|k| format!("c{k}")).collect();
        let r = report(&cm, &labels);
        let counts = recount(&pairs, c);
        let mut macro_f1 = 0.0;
        for (k, m) in r.per_class.iter().enumerate() {
            let [tp, fp, fn_, tn] = counts[k];
            let what = format!("trial {trial} class {k}");
            ensure(
                [m.true_positive, m.false_positive, m.false_negative, m.true_negative] == [tp, fp, fn_, tn],
                format!("{what}: counts"),
            )?;
            let precision = ratio(tp, tp + fp);
            let sensitivity = ratio(tp, tp + fn_);
            let f1 = if precision + sensitivity > 0.0 {
                2.0 * precision * sensitivity / (precision + sensitivity)
            } else {
                0.0
            };
            close(m.precision, precision, &format!("{what} precision"))?;
            close(m.sensitivity, sensitivity, &format!("{what} sensitivity"))?;
            close(m.specificity, ratio(tn, tn + fp), &format!("{what} specificity"))?;
            close(m.f1, f1, &format!("{what} f1"))?;
            macro_f1 += f1 / c as f64;
        }
        let correct = pairs.iter().filter(|(a, p)| a == p).count() as u64;
        close(r.accuracy, ratio(correct, n as u64), &format!("trial {trial} accuracy"))?;
        close(r.macro_f1, macro_f1, &format!("trial {trial} macro f1"))?;
        close(r.mcc, correlation_mcc(&pairs, c), &format!("trial {trial} mcc"))?;
        close(mcc(&cm), r.mcc, &format!("trial {trial} mcc fn"))?;
    }
    let binary = ConfusionMatrix::from_counts(vec![vec![40, 5], vec![10, 45]]).map_err(|e| e.to_string())?;
    let m = mcc(&binary);
    // (40·45 − 10·5) / sqrt(50·45·50·55)
    ensure((m - 0.70353).abs() <= 1e-4, format!("binary mcc {m}"))?;
    Ok(format!("100 random matrices agree with the recount, binary mcc {m:.5}"))
}

// A3

struct A3Artifacts {
    dir: PathBuf,
    checkpoint: PathBuf,
}

fn a3(work: &Path) -> (Outcome, Option<A3Artifacts>) {
    let run = |dir: &Path| -> Result<(String, Duration), String> {
        fs::create_dir_all(dir).map_err(|e| e.to_string())?;
        let start = Instant::now();
        leafscan(&["dataset", "synth", "--classes", "10", "--per-class", "150", "--seed", "7"], dir)?;
        let out = leafscan(&["train", "--epochs", "15", "--seed", "7", "--log", "train.jsonl"], dir)?;
        Ok((out, start.elapsed()))
    };
    let first = work.join("a3-first");
    let (out, elapsed) = match run(&first) {
        Ok(r) => r,
        Err(e) => return (Err(e), None),
    };
    let artifacts = A3Artifacts {
        checkpoint: first.join("model.ckpt"),
        dir: first.clone(),
    };
    let check = || -> Outcome {
        let accuracy: f64 = field(&out, "val_accuracy")?.parse().map_err(|_| "bad val_accuracy")?;
        ensure(accuracy >= 0.95, format!("validation accuracy {accuracy}"))?;
        ensure(elapsed <= Duration::from_secs(15 * 60), format!("took {elapsed:?}"))?;

        let log = fs::read_to_string(first.join("train.jsonl")).map_err(|e| e.to_string())?;
        let losses: Vec<f64> = log
            .lines()
            .map(|l| serde_json::from_str::<Value>(l).ok().and_then(|v| v["train_loss"].as_f64()))
            .collect::<Option<_>>()
            .ok_or("unreadable training log")?;
        let early = &losses[..losses.len().min(6)];
        let transitions = early.len().saturating_sub(1);
        let falling = early.windows(2).filter(|w| w[1] <= w[0]).count();
        ensure(falling + 1 >= transitions, format!("early losses not decreasing: {early:?}"))?;

        let second = work.join("a3-second");
        let (_, rerun) = run(&second)?;
        let a = fs::read(&artifacts.checkpoint).map_err(|e| e.to_string())?;
        let b = fs::read(second.join("model.ckpt")).map_err(|e| e.to_string())?;
        ensure(a == b, "rerun checkpoint differs")?;
        Ok(format!(
            "val accuracy {accuracy:.4} in {:.0}s, rerun {:.0}s byte-identical ({} bytes), {falling}/{} early loss steps non-increasing",
            elapsed.as_secs_f64(),
            rerun.as_secs_f64(),
            a.len(),
            transitions
        ))
    };
    (check(), Some(artifacts))
}

// A4

fn a4(a3: &A3Artifacts) -> Outcome {
    let detector = a3.dir.join("detector.ckpt");
    let out = leafscan(&["train-detector", "--seed", "7", "--out", "detector.ckpt"], &a3.dir)?;
    let heldout = a3.dir.join("heldout");
    leafscan(
        &["dataset", "synth", "--classes", "10", "--per-class", "20", "--seed", "1007", "--out", "heldout"],
        &a3.dir,
    )?;
    let (model, _) = checkpoint::load(&detector).map_err(|e| e.to_string())?;
    let truth = read_annotations(&heldout.join("annotations.txt")).map_err(|e| e.to_string())?;
    let options = DetectOptions::default();
    let mut hits = 0;
    for (rel, boxes) in &truth {
        let image = ImageRgb8::open(&heldout.join(rel)).map_err(|e| e.to_string())?;
        let found = detect(&model, &image, &options).map_err(|e| e.to_string())?;
        if found.len() == 1 && iou(&found[0].bbox, &boxes[0]) >= 0.5 {
            hits += 1;
        }
    }
    let rate = hits as f64 / truth.len() as f64;
    ensure(rate >= 0.9, format!("{hits}/{} held-out images with one good detection", truth.len()))?;
    Ok(format!(
        "{hits}/{} held-out images with exactly one detection at IoU >= 0.5 (training val rate {})",
        truth.len(),
        field(&out, "val_single_hit_rate")?
    ))
}

// A5

fn a5(work: &Path, a3: Option<&A3Artifacts>) -> Outcome {
    let dir = work.join("a5");
    fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
    let err = |e: &dyn std::fmt::Display| e.to_string();

    let config = BackboneConfig {
        blocks: vec![ConvBlock {
            out_channels: 3,
            stride: 1,
            pool: true,
        }],
        embedding_dim: 4,
        num_classes: 2,
        input_size: 16,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut tiny = Model::init(config, vec!["a".into(), "b".into()], &mut rng).map_err(|e| err(&e))?;
    tiny.init_detector(2, &mut rng).map_err(|e| err(&e))?;
    let mut files = vec![(dir.join("tiny.ckpt"), true)];
    checkpoint::save(&tiny, &files[0].0).map_err(|e| err(&e))?;
    if let Some(a3) = a3 {
        files.push((a3.checkpoint.clone(), false));
    }

    let mut flips = 0;
    for (path, exhaustive) in &files {
        let bytes = fs::read(path).map_err(|e| err(&e))?;
        let (model, _) = checkpoint::load(path).map_err(|e| err(&e))?;
        let again = checkpoint::model_to_bytes(&model).map_err(|e| err(&e))?;
        ensure(again == bytes, format!("{} does not round-trip", path.display()))?;
        let (reloaded, _) = checkpoint::model_from_bytes(&again).map_err(|e| err(&e))?;
        ensure(reloaded.params() == model.params(), "parameters differ after reload")?;

        let positions: Vec<usize> = if *exhaustive {
            (0..bytes.len()).collect()
        } else {
            (0..500).map(|_| rng.random_range(0..bytes.len())).collect()
        };
        for pos in positions {
            let mut damaged = bytes.clone();
            damaged[pos] ^= 1 << rng.random_range(0..8);
            ensure(
                checkpoint::model_from_bytes(&damaged).is_err(),
                format!("flip at byte {pos} of {} accepted", path.display()),
            )?;
            flips += 1;
        }
    }

    let log = dir.join("requests.jsonl");
    let (mut store, _) = RequestStore::open(&log).map_err(|e| err(&e))?;
    for i in 0..4 {
        store
            .create(RequestPayload::ExpertContact {
                channel: Channel::Text,
                message: format!("leaves curling {i}"),
            })
            .map_err(|e| err(&e))?;
    }
    store.close(2).map_err(|e| err(&e))?;
    let before: Vec<Value> = store.list(None).iter().map(|r| json!(r)).collect();
    let intact = fs::read(&log).map_err(|e| err(&e))?;
    drop(store);

    let (store, warnings) = RequestStore::open(&log).map_err(|e| err(&e))?;
    let after: Vec<Value> = store.list(None).iter().map(|r| json!(r)).collect();
    ensure(after == before && warnings.is_empty(), "clean replay differs")?;
    drop(store);

    let mut torn = intact.clone();
    torn.extend_from_slice(br#"{"id":5,"kind":"expert_contact","chan"#);
    fs::write(&log, &torn).map_err(|e| err(&e))?;
    let (mut store, warnings) = RequestStore::open(&log).map_err(|e| err(&e))?;
    let after: Vec<Value> = store.list(None).iter().map(|r| json!(r)).collect();
    ensure(after == before, "torn final line changed state")?;
    ensure(warnings.len() == 1, format!("expected one warning, got {warnings:?}"))?;
    ensure(fs::read(&log).map_err(|e| err(&e))? == intact, "torn tail not truncated")?;
    let next = store
        .create(RequestPayload::ExpertContact {
            channel: Channel::Voice,
            message: "after recovery".into(),
        })
        .map_err(|e| err(&e))?;
    ensure(next.id == 5, format!("next id {}", next.id))?;
    drop(store);

    let mut corrupt = intact.clone();
    corrupt.splice(0..1, *b"#");
    fs::write(&log, &corrupt).map_err(|e| err(&e))?;
    ensure(RequestStore::open(&log).is_err(), "corrupt interior line accepted")?;

    Ok(format!(
        "{} checkpoints round-trip, {flips} single-bit flips rejected, log replay recovers a torn tail",
        files.len()
    ))
}

// A6

fn oracle_iou(a: &BBox, b: &BBox) -> f64 {
    let span = |c: f32, w: f32| (f64::from(c) - f64::from(w) / 2.0, f64::from(c) + f64::from(w) / 2.0);
    let (ax, bx) = (span(a.cx, a.w), span(b.cx, b.w));
    let (ay, by) = (span(a.cy, a.h), span(b.cy, b.h));
    let overlap = |p: (f64, f64), q: (f64, f64)| (p.1.min(q.1) - p.0.max(q.0)).max(0.0);
    let inter = overlap(ax, bx) * overlap(ay, by);
    let union = (ax.1 - ax.0) * (ay.1 - ay.0) + (bx.1 - bx.0) * (by.1 - by.0) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Suppression formulation: repeatedly take the best remaining box and
/// delete everything overlapping it too much.
fn oracle_nms(detections: &[Detection], threshold: f64) -> Vec<Detection> {
    let mut remaining: Vec<Detection> = detections.to_vec();
    let mut kept = Vec::new();
    while !remaining.is_empty() {
        let best = (0..remaining.len())
            .reduce(|i, j| {
                let (a, b) = (&remaining[i], &remaining[j]);
                let a_first = a.confidence > b.confidence
                    || (a.confidence == b.confidence
                        && (a.bbox.cx < b.bbox.cx || (a.bbox.cx == b.bbox.cx && a.bbox.cy <= b.bbox.cy)));
                if a_first {
                    i
                } else {
                    j
                }
            })
            .unwrap();
        let top = remaining.swap_remove(best);
        remaining.retain(|d| oracle_iou(&top.bbox, &d.bbox) <= threshold);
        kept.push(top);
    }
    kept
}

fn random_detection(rng: &mut ChaCha8Rng) -> Detection {
    let w: f32 = rng.random_range(0.02..0.6);
    let h: f32 = rng.random_range(0.02..0.6);
    Detection {
        bbox: BBox {
            cx: rng.random_range(0.0..1.0),
            cy: rng.random_range(0.0..1.0),
            w,
            h,
        },
        // Coarse confidences so ties and their ordering rule get exercised.
        confidence: f32::from(rng.random_range(0u8..20)) / 20.0,
    }
}

fn a6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut pairs = 0;
    for instance in 0..1000 {
        let n = rng.random_range(0..=50);
        let boxes: Vec<Detection> = (0..n).map(|_| random_detection(&mut rng)).collect();
        for a in &boxes {
            for b in &boxes {
                let (ab, ba) = (iou(&a.bbox, &b.bbox), iou(&b.bbox, &a.bbox));
                ensure(ab == ba, format!("instance {instance}: iou not symmetric"))?;
                ensure((0.0..=1.0).contains(&ab), format!("instance {instance}: iou {ab}"))?;
                ensure((ab - oracle_iou(&a.bbox, &b.bbox)).abs() < 1e-9, "iou disagrees with oracle")?;
                pairs += 1;
            }
            ensure((iou(&a.bbox, &a.bbox) - 1.0).abs() < 1e-12, "self iou is not 1")?;
        }
        let threshold = rng.random_range(0.1..0.9);
        let got = nms(&boxes, threshold);
        let want = oracle_nms(&boxes, threshold);
        ensure(got == want, format!("instance {instance}: nms {} boxes vs oracle {}", got.len(), want.len()))?;
    }
    Ok(format!("1000 instances match the oracle, {pairs} IoU pairs symmetric and in range"))
}

// A7

struct Server {
    child: Child,
    base: String,
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn start_server(checkpoint: &Path, dir: &Path) -> Result<Server, String> {
    let kb = seed_kb();
    let mut child = Command::new(env!("CARGO_BIN_EXE_leafscan"))
        .args(["serve", "--port", "0", "--model"])
        .arg(checkpoint)
        .arg("--kb")
        .arg(&kb)
        .arg("--store")
        .arg(dir.join("requests.jsonl"))
        .env("RUST_LOG", "warn")
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .map_err(|e| e.to_string())?;
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap())
        .read_line(&mut line)
        .map_err(|e| e.to_string())?;
    let base = line
        .trim()
        .strip_prefix("listening on ")
        .ok_or_else(|| format!("unexpected startup line {line:?}"))?
        .to_string();
    Ok(Server { child, base })
}

fn a7(work: &Path, a3: &A3Artifacts) -> Outcome {
    let dir = work.join("a7");
    fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
    let server = start_server(&a3.checkpoint, &dir)?;
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .http_status_as_error(false)
        .build()
        .into();
    let url = |p: &str| format!("{}{p}", server.base);
    let err = |e: ureq::Error| e.to_string();
    let read = |mut r: ureq::http::Response<ureq::Body>| -> Result<(u16, Value), String> {
        let status = r.status().as_u16();
        let text = r.body_mut().read_to_string().map_err(err)?;
        Ok((status, serde_json::from_str(&text).unwrap_or(Value::Null)))
    };

    let sample = fs::read_dir(a3.dir.join("synthetic"))
        .map_err(|e| e.to_string())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .find(|p| p.is_dir())
        .ok_or("no class directories")?
        .join("img_0000.ppm");
    let image = fs::read(&sample).map_err(|e| e.to_string())?;
    let classes = checkpoint::load(&a3.checkpoint).map_err(|e| e.to_string())?.0.labels().len();

    let diagnose = |k: usize| {
        read(agent
            .post(url(&format!("/api/diagnose?k={k}")))
            .header("content-type", "image/x-portable-pixmap")
            .send(&image[..])
            .map_err(err)?)
    };
    let (status, full) = diagnose(classes)?;
    ensure(status == 200, format!("diagnose status {status}"))?;
    let probs: Vec<f64> = full["top_k"]
        .as_array()
        .ok_or("no top_k")?
        .iter()
        .filter_map(|t| t["probability"].as_f64())
        .collect();
    ensure(probs.len() == classes, "k = C did not return every class")?;
    let mass: f64 = probs.iter().sum();
    ensure((mass - 1.0).abs() <= 1e-5, format!("probability mass {mass}"))?;
    let (_, top3) = diagnose(3)?;
    let top3: Vec<f64> = top3["top_k"].as_array().ok_or("no top_k")?.iter().filter_map(|t| t["probability"].as_f64()).collect();
    ensure(top3.len() == 3 && top3.windows(2).all(|w| w[0] >= w[1]), format!("top 3 {top3:?}"))?;

    let garbage = agent.post(url("/api/diagnose")).send(&b"not an image"[..]).map_err(err)?;
    let (bad_image, _) = read(garbage)?;
    ensure(bad_image == 400, format!("bad image status {bad_image}"))?;
    let blank = encode_ppm(&ImageRgb8::filled(1, 1, [0, 0, 0]).map_err(|e| e.to_string())?);
    let truncated = agent.post(url("/api/diagnose")).send(&blank[..blank.len() - 1]).map_err(err)?;
    ensure(read(truncated)?.0 == 400, "truncated image accepted")?;

    let body = json!({"kind": "expert_contact", "channel": "video", "message": "yellow rings on leaves"});
    let (created, record) = read(agent.post(url("/api/requests")).header("content-type", "application/json").send(body.to_string()).map_err(err)?)?;
    ensure(created == 201, format!("create status {created}"))?;
    let id = record["id"].as_u64().ok_or("no id")?;
    let (got, _) = read(agent.get(url(&format!("/api/requests/{id}"))).call().map_err(err)?)?;
    ensure(got == 200, format!("get status {got}"))?;
    let (missing, _) = read(agent.get(url("/api/requests/987654")).call().map_err(err)?)?;
    ensure(missing == 404, format!("missing status {missing}"))?;
    let close_url = url(&format!("/api/requests/{id}/close"));
    let (closed, record) = read(agent.post(&close_url).send_empty().map_err(err)?)?;
    ensure(closed == 200 && record["status"] == "closed", format!("close status {closed}"))?;
    let (again, _) = read(agent.post(&close_url).send_empty().map_err(err)?)?;
    ensure(again == 409, format!("second close status {again}"))?;
    let (invalid, _) = read(
        agent
            .post(url("/api/requests"))
            .header("content-type", "application/json")
            .send(json!({"kind": "product_order", "product": "seed", "quantity": 0}).to_string())
            .map_err(err)?,
    )?;
    ensure(invalid == 400, format!("invalid order status {invalid}"))?;

    let top = &full["top_k"][0]["label"];
    Ok(format!(
        "mass {mass:.6} over {classes} classes, top-3 descending, bad image 400, requests 201/404/409 (top label {top})"
    ))
}

fn main() {
    // libtest passes flags such as --nocapture; none apply here.
    let work = tempfile::tempdir().expect("temp dir");
    let w = work.path();
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut report = |name: &'static str, outcome: Outcome| {
        let line = match &outcome {
            Ok(detail) => format!("{name} PASS {detail}"),
            Err(why) => format!("{name} FAIL {why}"),
        };
        println!("{line}");
        let _ = std::io::stdout().flush();
        results.push((name, outcome));
    };

    report("A1", a1());
    report("A2", a2());
    let (a3_outcome, artifacts) = a3(w);
    report("A3", a3_outcome);
    let missing = || Err("needs the A3 checkpoint".to_string());
    report("A4", artifacts.as_ref().map_or_else(missing, a4));
    report("A5", a5(w, artifacts.as_ref()));
    report("A6", a6());
    report("A7", artifacts.as_ref().map_or_else(missing, |a| a7(w, a)));

    let failed: BTreeSet<&str> = results.iter().filter(|(_, o)| o.is_err()).map(|(n, _)| *n).collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria passed", results.len());
    } else {
        println!("acceptance: failed {failed:?}");
        std::process::exit(1);
    }
}
