//! Subcommand implementations.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use leafscan_api::{load_state, serve, DiagnosisResponse, DiseaseVerdict, ServeConfig};
use leafscan_core::checkpoint;
use leafscan_core::dataset::{
    generate_synthetic, read_annotations, read_manifest, scan, split, write_manifest, Manifest, SplitConfig,
    SyntheticConfig, ANNOTATION_FILE,
};
use leafscan_core::gradcheck_suite::run_suite;
use leafscan_core::image::ImageRgb8;
use leafscan_core::kb::KnowledgeBase;
use leafscan_core::metrics::{confusion, report};
use leafscan_core::pipeline::{diagnose, eval_config, DetectOptions};
use leafscan_core::train::{
    evaluate, train_classifier, train_detector, BoxedImages, DetectorTrainConfig, LabeledImages, TrainConfig,
};
use serde::Serialize;

use crate::args::{Cli, Command, DataArgs, DatasetCommand, KbCommand};
use crate::Failure;

type Result<T = ()> = std::result::Result<T, Failure>;

pub fn run(cli: Cli) -> Result {
    let seed = cli.seed;
    match cli.command {
        Command::Dataset(cmd) => dataset(cmd, seed),
        Command::Train(a) => {
            let (train, val) = load_split(&a.data, seed)?;
            let config = TrainConfig {
                epochs: a.epochs,
                batch_size: a.batch_size,
                learning_rate: a.learning_rate,
                momentum: a.momentum,
                lambda_metric: a.lambda_metric,
                center_rate: a.center_rate,
                seed,
                ..TrainConfig::default()
            };
            config.validate()?;
            let classes = train.classes.clone();
            let (train, val) = (labelled(&train)?, labelled(&val)?);
            tracing::info!(train = train.len(), val = val.len(), classes = classes.len(), "training classifier");
            let mut log = open_log(a.log.as_deref())?;
            let outcome = train_classifier(&train, &val, classes, &config, |e| {
                tracing::info!(
                    "epoch {:>3} train_loss={:.6} train_acc={:.4} val_loss={:.6} val_acc={:.4} ({:.1}s)",
                    e.epoch,
                    e.train_loss,
                    e.train_accuracy,
                    e.val_loss,
                    e.val_accuracy,
                    e.seconds
                );
                append_log(&mut log, e);
            })?;
            let crc = checkpoint::save(&outcome.model, &a.out)?;
            let best = &outcome.log[outcome.best_epoch - 1];
            println!("checkpoint={}", a.out.display());
            println!("crc={crc:08x}");
            println!("best_epoch={}", outcome.best_epoch);
            println!("val_accuracy={}", best.val_accuracy);
            Ok(())
        }
        Command::TrainDetector(a) => {
            let (model, _) = checkpoint::load(&a.model)?;
            let (train, val) = load_split(&a.data, seed)?;
            let (train, val) = (boxed(&train)?, boxed(&val)?);
            let config = DetectorTrainConfig {
                epochs: a.epochs,
                batch_size: a.batch_size,
                learning_rate: a.learning_rate,
                momentum: a.momentum,
                hidden_channels: a.hidden,
                seed,
                confidence_threshold: a.confidence,
                nms_threshold: a.nms,
            };
            tracing::info!(train = train.images.len(), val = val.images.len(), "training detector head");
            let mut log = open_log(a.log.as_deref())?;
            let outcome = train_detector(&model, &train, &val, &eval_config(&model), &config, |e| {
                tracing::info!(
                    "epoch {:>3} train_loss={:.6} val_loss={:.6} val_single_hit={:.4} ({:.1}s)",
                    e.epoch,
                    e.train_loss,
                    e.val_loss,
                    e.val_single_hit_rate,
                    e.seconds
                );
                append_log(&mut log, e);
            })?;
            let out = a.out.as_deref().unwrap_or(&a.model);
            let crc = checkpoint::save(&outcome.model, out)?;
            let last = outcome.log.last().expect("at least one epoch");
            println!("checkpoint={}", out.display());
            println!("crc={crc:08x}");
            println!("val_single_hit_rate={}", last.val_single_hit_rate);
            Ok(())
        }
        Command::Eval(a) => {
            let (model, _) = checkpoint::load(&a.model)?;
            let manifest = match &a.manifest {
                Some(path) => read_manifest(path, None)?,
                None => scan(&a.data)?,
            };
            let manifest = manifest.with_classes(model.labels())?;
            let data = labelled(&manifest)?;
            let evaluation = evaluate(&model, &data, &eval_config(&model))?;
            let cm = confusion(&evaluation.predictions, &data.labels, model.labels().len())?;
            let metrics = report(&cm, model.labels());
            if a.json {
                println!("{}", serde_json::to_string_pretty(&metrics)?);
            } else {
                print!("{}", metrics.to_text());
            }
            Ok(())
        }
        Command::Diagnose(a) => {
            let (model, crc) = checkpoint::load(&a.model)?;
            let kb = a.kb.as_deref().map(KnowledgeBase::load).transpose()?;
            let image = ImageRgb8::open(&a.image)?;
            let options = DetectOptions {
                confidence_threshold: a.confidence,
                nms_threshold: a.nms,
            };
            let diagnosis = diagnose(&model, &image, a.k, &options)?;
            let kb = kb.unwrap_or_else(KnowledgeBase::empty);
            let response = DiagnosisResponse::new(diagnosis, &kb, crc);
            if a.json {
                println!("{}", serde_json::to_string_pretty(&response)?);
            } else {
                print_diagnosis(&response);
            }
            Ok(())
        }
        Command::Gradcheck(a) => {
            if a.seeds == 0 {
                return Err(Failure::validation("--seeds must be positive"));
            }
            let report = run_suite(a.seeds, seed)?;
            if a.json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                for l in &report.layers {
                    println!(
                        "layer={} seeds={} max_relative_error={:.3e} {}",
                        l.layer,
                        l.seeds,
                        l.max_relative_error,
                        if l.passed { "ok" } else { "FAIL" }
                    );
                }
            }
            if report.passed() {
                Ok(())
            } else {
                Err(Failure::Runtime(anyhow::anyhow!(
                    "gradient check exceeded relative error {}",
                    report.tolerance
                )))
            }
        }
        Command::Kb(KbCommand::Validate { path }) => {
            let kb = KnowledgeBase::load(&path)?;
            println!(
                "ok version={} crops={} diseases={}",
                kb.version(),
                kb.crops().len(),
                kb.diseases().len()
            );
            Ok(())
        }
        Command::Kb(KbCommand::Search { query, kb, json }) => {
            let kb = KnowledgeBase::load(&kb)?;
            let hits = kb.search(&query);
            if json {
                println!("{}", serde_json::to_string_pretty(&hits)?);
            } else {
                for d in hits {
                    println!("{}\t{}", d.id, d.name);
                }
            }
            Ok(())
        }
        Command::Serve(a) => {
            let config = ServeConfig {
                host: a.host,
                port: a.port,
                model: a.model,
                kb: a.kb,
                store: a.store,
                max_body_bytes: a.max_body_bytes,
                detect: DetectOptions {
                    confidence_threshold: a.confidence,
                    nms_threshold: a.nms,
                },
            };
            let (state, audit) = load_state(&config)?;
            tracing::info!(
                mapped = audit.mapped.len(),
                healthy = audit.healthy.len(),
                unmapped = audit.unmapped.len(),
                "label audit"
            );
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(serve(state, &config.host, config.port, |addr| {
                println!("listening on http://{addr}");
                let _ = std::io::stdout().flush();
            }))?;
            Ok(())
        }
    }
}

fn dataset(cmd: DatasetCommand, seed: u64) -> Result {
    match cmd {
        DatasetCommand::Scan { root, out } => {
            let manifest = scan(&root)?;
            for (name, count) in manifest.classes.iter().zip(manifest.class_counts()) {
                println!("{name}\t{count}");
            }
            println!("total\t{}", manifest.len());
            if let Some(out) = out {
                write_manifest(&manifest, &out)?;
            }
            Ok(())
        }
        DatasetCommand::Split {
            root,
            val_fraction,
            train_out,
            val_out,
        } => {
            let manifest = scan(&root)?;
            let (train, val) = split(&manifest, SplitConfig::new(val_fraction, seed)?)?;
            write_manifest(&train, &train_out)?;
            write_manifest(&val, &val_out)?;
            println!("train={} val={}", train.len(), val.len());
            Ok(())
        }
        DatasetCommand::Synth {
            out,
            classes,
            per_class,
            image_size,
        } => {
            let summary = generate_synthetic(
                &out,
                &SyntheticConfig {
                    classes,
                    per_class,
                    image_size,
                    seed,
                },
            )?;
            println!("images={} classes={} out={}", summary.images, summary.classes.len(), out.display());
            Ok(())
        }
    }
}

fn load_split(args: &DataArgs, seed: u64) -> Result<(Manifest, Manifest)> {
    match (&args.train_manifest, &args.val_manifest) {
        (Some(t), Some(v)) => {
            let train = read_manifest(t, None)?;
            let val = read_manifest(v, None)?.with_classes(&train.classes)?;
            Ok((train, val))
        }
        _ => {
            let manifest = scan(&args.data)?;
            Ok(split(&manifest, SplitConfig::new(args.val_fraction, seed)?)?)
        }
    }
}

fn labelled(m: &Manifest) -> Result<LabeledImages> {
    Ok(LabeledImages {
        images: m.load_images()?,
        labels: m.labels(),
    })
}

fn boxed(m: &Manifest) -> Result<BoxedImages> {
    let path = m.root.join(ANNOTATION_FILE);
    let annotations = read_annotations(&path)?;
    let boxes = m
        .samples
        .iter()
        .map(|s| {
            annotations
                .get(&s.path)
                .cloned()
                .ok_or_else(|| Failure::validation(format!("{} has no boxes for {}", path.display(), s.path)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BoxedImages {
        images: m.load_images()?,
        boxes,
    })
}

fn open_log(path: Option<&Path>) -> Result<Option<BufWriter<File>>> {
    Ok(path.map(File::create).transpose()?.map(BufWriter::new))
}

fn append_log<T: Serialize>(log: &mut Option<BufWriter<File>>, entry: &T) {
    if let Some(w) = log {
        let line = serde_json::to_string(entry).expect("plain data serializes");
        if writeln!(w, "{line}").and_then(|_| w.flush()).is_err() {
            tracing::warn!("could not write training log");
        }
    }
}

fn print_diagnosis(r: &DiagnosisResponse) {
    println!("model_version={}", r.model_version);
    for d in &r.detections {
        let b = d.bbox;
        println!(
            "detection cx={:.4} cy={:.4} w={:.4} h={:.4} confidence={:.4}",
            b.cx, b.cy, b.w, b.h, d.confidence
        );
    }
    for (i, t) in r.top_k.iter().enumerate() {
        println!("top{} label={} probability={:.6}", i + 1, t.label, t.probability);
    }
    match &r.disease {
        DiseaseVerdict::Mapped { entry, .. } => println!("disease=mapped id={} name={}", entry.id, entry.name),
        DiseaseVerdict::Healthy { .. } => println!("disease=healthy"),
        DiseaseVerdict::Unmapped { .. } => println!("disease=unmapped"),
    }
}
