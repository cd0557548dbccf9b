use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use attnprobe_core::io::{
    read_attention_dump, read_manifest, write_attention_dump, write_features, write_manifest, DatasetManifest,
    ManifestEntry,
};
use attnprobe_core::model::{init_weights, load_weights, save_weights, ModelConfig, ModelWeights};
use attnprobe_core::prm::export_prm;
use attnprobe_core::probe::{eval_on_frames, frame_set, load_probe, save_probe, split_dataset, train_on_frames, utterance_key};
use attnprobe_core::report::{
    confusion_csv, eval_csv, heatmap_csv, layer_counts_csv, parse_scores_csv, scores_csv, summarize, summary_csv, EvalRow,
};
use attnprobe_core::synth::{battery_dump, generate_battery, write_dataset};
use attnprobe_core::{
    ablate_cumulative, categorize, category_counts, emit_curve, generate_dataset, prm_aggregate, rank_heads, score_all,
    score_heads, AblationSetup, AttentionDump, AttentionOverride, Category, Encoder, Error, FeatureMatrix, HeadCategory,
    HeadId, HeadMask, HeadScores, HeadSelection, InjectionPlan, ProbeConfig, Representer, SynthDatasetConfig, SynthMode,
};
use rayon::prelude::*;

use crate::record::{beside, RunRecord};
use crate::{
    AblateArgs, CategorizeArgs, Command, ForwardArgs, ModeArg, ModelArgs, PrmArgs, ProbeArgs, ProbeEvalArgs,
    ProbeTrainArgs, ReportArgs, ScoreArgs, SynthBatteryArgs, SynthDataArgs,
};

pub fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Score(a) => score(&a),
        Command::Categorize(a) => categorize_cmd(&a),
        Command::Prm(a) => prm(&a),
        Command::SynthBattery(a) => synth_battery(&a),
        Command::SynthData(a) => synth_data(&a),
        Command::Forward(a) => forward(&a),
        Command::ProbeTrain(a) => probe_train(&a),
        Command::ProbeEval(a) => probe_eval(&a),
        Command::Ablate(a) => ablate(&a),
        Command::Report(a) => report(&a),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io { path: path.into(), source: e })?;
    Ok(())
}

fn read_text(path: &Path) -> Result<String> {
    Ok(std::fs::read_to_string(path).map_err(|e| Error::Io { path: path.into(), source: e })?)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.into(), source: e })?;
    Ok(())
}

fn load_manifest(path: &Path, rec: &mut RunRecord) -> Result<DatasetManifest> {
    let path = std::path::absolute(path).map_err(|e| Error::Io { path: path.into(), source: e })?;
    let manifest = read_manifest(&path)?;
    rec.manifest(&path, &manifest)?;
    Ok(manifest)
}

fn load_dump_files(paths: &[PathBuf], rec: &mut RunRecord) -> Result<Vec<AttentionDump>> {
    paths
        .iter()
        .map(|p| {
            rec.input(p)?;
            Ok(read_attention_dump(p)?)
        })
        .collect()
}

fn manifest_dumps(manifest: &DatasetManifest) -> Result<Vec<AttentionDump>> {
    Ok(manifest.entries.iter().map(|e| manifest.load_attention(e)).collect::<attnprobe_core::Result<_>>()?)
}

fn build_model(
    args: &ModelArgs,
    seed: u64,
    feature_dim: usize,
    rec: &mut RunRecord,
) -> Result<(ModelWeights, Option<InjectionPlan>)> {
    let config = match &args.model_config {
        Some(p) => {
            rec.input(p)?;
            ModelConfig::read(p)?
        }
        None => ModelConfig { feature_dim, seed, ..ModelConfig::default() },
    };
    let weights = match &args.weights {
        Some(p) => {
            rec.input(p)?;
            load_weights(p, &config)?
        }
        None => init_weights(&config, seed)?,
    };
    let plan = if args.inject_battery {
        let total = config.num_layers * config.num_heads;
        if total % 3 != 0 {
            bail!("--inject-battery needs a head count divisible by 3, model has {total}");
        }
        Some(InjectionPlan::from_battery(config.num_layers, config.num_heads, total / 3, seed)?)
    } else {
        None
    };
    rec.resolve("model_config", config.to_text());
    Ok((weights, plan))
}

fn mask_of(heads: &[HeadId]) -> HeadMask {
    heads.iter().copied().collect()
}

fn probe_config(args: &ProbeArgs, seed: u64) -> ProbeConfig {
    ProbeConfig {
        learning_rate: args.learning_rate,
        batch_size: args.batch_size,
        num_steps: args.steps,
        seed,
        l2_penalty: args.l2,
    }
}

fn score(args: &ScoreArgs) -> Result<()> {
    let mut rec = RunRecord::new("score", args, Some(args.seed))?;
    let dumps = match &args.manifest {
        Some(m) => manifest_dumps(&load_manifest(m, &mut rec)?)?,
        None if !args.attention.is_empty() => load_dump_files(&args.attention, &mut rec)?,
        None => bail!("give --manifest or --attention"),
    };
    let sample = args.sample.unwrap_or(dumps.len().min(10));
    rec.resolve("sample", sample);
    let scores = score_all(&dumps, sample, args.seed)?;
    let cats = if scores.len() >= 2 { Some(categorize(&scores)?) } else { None };
    write_text(&args.out, &scores_csv(&scores, cats.as_deref())?)?;
    rec.output(&args.out);
    println!("scored {} heads over {sample} of {} utterances", scores.len(), dumps.len());
    rec.write(&beside(&args.out))
}

fn read_truth(path: &Path) -> Result<Vec<(HeadId, Category)>> {
    let text = read_text(path)?;
    let mut lines = text.lines().enumerate();
    if lines.next().map(|(_, l)| l.trim_end()) != Some("layer,head,category") {
        return Err(Error::Parse { path: path.into(), line: 1, message: "expected header `layer,head,category`".into() }.into());
    }
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let bad = |m: String| Error::Parse { path: path.into(), line: i + 1, message: m };
            let cols: Vec<&str> = l.trim_end().split(',').collect();
            if cols.len() != 3 {
                return Err(bad(format!("expected 3 columns, found {}", cols.len())).into());
            }
            let num = |s: &str| s.parse::<usize>().map_err(|e| bad(format!("`{s}`: {e}")));
            Ok((HeadId::new(num(cols[0])?, num(cols[1])?), cols[2].parse().map_err(bad)?))
        })
        .collect()
}

fn truth_csv(truth: &[(HeadId, Category)]) -> String {
    let mut out = String::from("layer,head,category\n");
    for (h, c) in truth {
        out.push_str(&format!("{},{},{c}\n", h.layer, h.head));
    }
    out
}

fn read_scores(path: &Path, rec: &mut RunRecord) -> Result<(Vec<HeadScores>, Vec<HeadCategory>)> {
    rec.input(path)?;
    let rows = parse_scores_csv(&read_text(path)?, path)?;
    let scores: Vec<HeadScores> = rows.iter().map(|r| r.scores()).collect();
    let cats = if rows.iter().all(|r| r.category.is_some()) {
        let computed = categorize(&scores).ok();
        rows.iter()
            .enumerate()
            .map(|(i, r)| HeadCategory {
                head: r.head,
                category: r.category.expect("checked"),
                z_scores: computed.as_ref().map_or([0.0; 3], |c| c[i].z_scores),
            })
            .collect()
    } else {
        categorize(&scores)?
    };
    Ok((scores, cats))
}

fn categorize_cmd(args: &CategorizeArgs) -> Result<()> {
    let mut rec = RunRecord::new("categorize", args, None)?;
    let scores = match &args.scores {
        Some(p) => {
            rec.input(p)?;
            parse_scores_csv(&read_text(p)?, p)?.iter().map(|r| r.scores()).collect()
        }
        None if !args.attention.is_empty() => {
            let dumps = load_dump_files(&args.attention, &mut rec)?;
            score_heads(&dumps.iter().collect::<Vec<_>>())?
        }
        None => bail!("give --scores or --attention"),
    };
    let cats = categorize(&scores)?;
    write_text(&args.out, &scores_csv(&scores, Some(&cats))?)?;
    rec.output(&args.out);
    let counts = category_counts(&cats);
    println!("global {} vertical {} diagonal {}", counts.global, counts.vertical, counts.diagonal);
    rec.resolve("counts", [counts.global, counts.vertical, counts.diagonal]);
    if let Some(t) = &args.truth {
        rec.input(t)?;
        let truth = read_truth(t)?;
        let recovered = truth
            .iter()
            .filter(|(h, c)| cats.iter().any(|hc| hc.head == *h && hc.category == *c))
            .count();
        println!("recovered {recovered}/{}", truth.len());
        rec.resolve("recovered", recovered);
        rec.resolve("truth_heads", truth.len());
    }
    rec.write(&beside(&args.out))
}

fn prm(args: &PrmArgs) -> Result<()> {
    let mut rec = RunRecord::new("prm", args, None)?;
    let manifest = load_manifest(&args.manifest, &mut rec)?;
    let (inventory, utts) = manifest.load_all()?;
    let dumps = manifest_dumps(&manifest)?;
    let labels: Vec<_> = utts.iter().map(|u| &u.labels).collect();
    let pairs: Vec<_> = dumps.iter().zip(labels).collect();
    let heads = args.heads.clone().map_or(HeadSelection::All, HeadSelection::Only);
    let mut prm = prm_aggregate(&pairs, &inventory, args.layer, &heads, args.max_utterances.unwrap_or(usize::MAX))?;
    if args.transpose {
        prm = prm.transposed();
    }
    for p in export_prm(&prm, &args.out, args.pgm)? {
        rec.output(p);
    }
    match prm.self_relation_fraction() {
        Some(f) => println!("self-relation fraction {f:.4}"),
        None => println!("no populated rows"),
    }
    rec.resolve("self_relation_fraction", prm.self_relation_fraction());
    rec.write(&beside(&args.out))
}

fn synth_battery(args: &SynthBatteryArgs) -> Result<()> {
    let mut rec = RunRecord::new("synth-battery", args, Some(args.seed))?;
    create_dir(&args.out_dir)?;
    let battery = generate_battery(args.frames, args.per_category, args.seed)?;
    let dump = battery_dump("battery", &battery)?;
    let att = args.out_dir.join("battery.att");
    write_attention_dump(&dump, &att)?;
    let truth: Vec<(HeadId, Category)> =
        battery.iter().enumerate().map(|(i, b)| (HeadId::new(0, i), b.category)).collect();
    let truth_path = args.out_dir.join("truth.csv");
    write_text(&truth_path, &truth_csv(&truth))?;
    rec.output(att);
    rec.output(truth_path);
    println!("wrote {} heads of {} frames", battery.len(), args.frames);
    rec.write(&args.out_dir.join("run.json"))
}

fn synth_data(args: &SynthDataArgs) -> Result<()> {
    let mut rec = RunRecord::new("synth-data", args, Some(args.seed))?;
    let mode = match args.mode {
        ModeArg::Local => {
            if !args.triggers.is_empty() || !args.dependents.is_empty() {
                bail!("--triggers and --dependents only apply to --mode harmony");
            }
            SynthMode::Local
        }
        ModeArg::Harmony => SynthMode::Harmony {
            trigger_classes: args.triggers.clone(),
            dependent_classes: args.dependents.clone(),
        },
    };
    let config = SynthDatasetConfig {
        num_utterances: args.utterances,
        min_frames: args.min_frames,
        max_frames: args.max_frames,
        num_classes: args.classes,
        feature_dim: args.feature_dim,
        prototype_noise: args.noise,
        mode,
        seed: args.seed,
    };
    let dataset = generate_dataset(&config)?;
    let manifest = write_dataset(&dataset, &args.out_dir)?;
    rec.output(manifest);
    let frames: usize = dataset.utterances.iter().map(|u| u.num_frames()).sum();
    println!("wrote {} utterances, {frames} frames", dataset.utterances.len());
    rec.write(&args.out_dir.join("run.json"))
}

fn save_model(weights: &ModelWeights, dir: &Path, rec: &mut RunRecord) -> Result<()> {
    let cfg = dir.join("model.cfg");
    let wgt = dir.join("model.wgt");
    weights.config().write(&cfg)?;
    save_weights(weights, &wgt)?;
    rec.output(cfg);
    rec.output(wgt);
    Ok(())
}

fn feature_dim(manifest: &DatasetManifest) -> Result<usize> {
    let first = manifest.entries.first().context("manifest has no utterances")?;
    let inventory = manifest.load_inventory()?;
    Ok(manifest.load_utterance(first, &inventory)?.features.feature_dim())
}

fn forward(args: &ForwardArgs) -> Result<()> {
    let mut rec = RunRecord::new("forward", args, Some(args.seed))?;
    let manifest = load_manifest(&args.manifest, &mut rec)?;
    let (_, utts) = manifest.load_all()?;
    let (weights, plan) = build_model(&args.model, args.seed, feature_dim(&manifest)?, &mut rec)?;
    create_dir(&args.out_dir)?;
    save_model(&weights, &args.out_dir, &mut rec)?;
    let encoder = Encoder::new(&weights);
    let mask = mask_of(&args.mask);
    let outputs = utts
        .par_iter()
        .map(|u| {
            let ov = match &plan {
                Some(p) => p.override_for(utterance_key(u.id()), u.num_frames())?,
                None => AttentionOverride::default(),
            };
            encoder.forward(&u.features, &mask, &ov)
        })
        .collect::<attnprobe_core::Result<Vec<_>>>()?;
    let out_dir = std::path::absolute(&args.out_dir).map_err(|e| Error::Io { path: args.out_dir.clone(), source: e })?;
    let mut rebased = manifest.rebased(&out_dir);
    for (entry, (out, utt)) in rebased.entries.iter_mut().zip(outputs.iter().zip(&utts)) {
        let att = PathBuf::from(format!("{}.att", entry.id));
        let rep = args.out_dir.join(format!("{}.rep.fea", entry.id));
        write_attention_dump(&out.dump, args.out_dir.join(&att))?;
        write_features(&FeatureMatrix::new(utt.id(), out.representations.mapv(|v| v as f32))?, &rep)?;
        rec.output(args.out_dir.join(&att));
        rec.output(rep);
        entry.attention = Some(att);
    }
    let manifest_out = args.out_dir.join("manifest.toml");
    write_manifest(&rebased, &manifest_out)?;
    rec.output(manifest_out);
    println!("ran {} utterances", utts.len());
    rec.write(&args.out_dir.join("run.json"))
}

fn write_sub_manifest(m: &DatasetManifest, dir: &Path, name: &str, rec: &mut RunRecord) -> Result<PathBuf> {
    let abs = std::path::absolute(dir).map_err(|e| Error::Io { path: dir.into(), source: e })?;
    let path = dir.join(name);
    write_manifest(&m.rebased(abs), &path)?;
    rec.output(&path);
    Ok(path)
}

fn load_entries(
    manifest: &DatasetManifest,
    entries: &[ManifestEntry],
) -> Result<(attnprobe_core::PhonemeInventory, Vec<attnprobe_core::LabeledUtterance>)> {
    let inventory = manifest.load_inventory()?;
    let utts = entries
        .iter()
        .map(|e| manifest.load_utterance(e, &inventory))
        .collect::<attnprobe_core::Result<Vec<_>>>()?;
    Ok((inventory, utts))
}

fn probe_train(args: &ProbeTrainArgs) -> Result<()> {
    let mut rec = RunRecord::new("probe-train", args, Some(args.seed))?;
    let manifest = load_manifest(&args.manifest, &mut rec)?;
    create_dir(&args.out_dir)?;
    let train_manifest = if args.no_split {
        manifest.clone()
    } else {
        let (train, test) = split_dataset(&manifest, args.split, args.seed)?;
        write_sub_manifest(&train, &args.out_dir, "train.toml", &mut rec)?;
        write_sub_manifest(&test, &args.out_dir, "test.toml", &mut rec)?;
        rec.resolve("test_utterances", test.len());
        train
    };
    rec.resolve("train_utterances", train_manifest.len());
    let (inventory, train) = load_entries(&train_manifest, &train_manifest.entries)?;
    let mask = mask_of(&args.mask);
    let model = if args.raw {
        None
    } else {
        let (weights, plan) = build_model(&args.model, args.seed, feature_dim(&manifest)?, &mut rec)?;
        save_model(&weights, &args.out_dir, &mut rec)?;
        Some((Encoder::new(&weights), plan))
    };
    let representer = match &model {
        None => Representer::RawFeatures,
        Some((encoder, plan)) => Representer::Encoder { encoder, mask: &mask, injection: plan.as_ref() },
    };
    let frames = frame_set(&train, &representer)?;
    let probe = train_on_frames(&frames, inventory.len(), &probe_config(&args.probe, args.seed))?;
    let accuracy = eval_on_frames(&probe, &frames)?.accuracy;
    let probe_path = args.out_dir.join("probe.wgt");
    save_probe(&probe, &probe_path)?;
    rec.output(probe_path);
    rec.resolve("train_accuracy", accuracy);
    println!("trained on {} frames, train accuracy {accuracy:.4}", frames.len());
    rec.write(&args.out_dir.join("run.json"))
}

fn probe_eval(args: &ProbeEvalArgs) -> Result<()> {
    let mut rec = RunRecord::new("probe-eval", args, Some(args.seed))?;
    let manifest = load_manifest(&args.manifest, &mut rec)?;
    let (inventory, utts) = manifest.load_all()?;
    rec.input(&args.probe)?;
    let probe = load_probe(&args.probe)?;
    let mask = mask_of(&args.mask);
    let model = if args.raw {
        None
    } else {
        let (weights, plan) = build_model(&args.model, args.seed, feature_dim(&manifest)?, &mut rec)?;
        Some((Encoder::new(&weights), plan))
    };
    let representer = match &model {
        None => Representer::RawFeatures,
        Some((encoder, plan)) => Representer::Encoder { encoder, mask: &mask, injection: plan.as_ref() },
    };
    let eval = attnprobe_core::eval_probe(&probe, &inventory, &utts, &representer)?;
    let row = EvalRow {
        pretrain: args.pretrain_id.clone(),
        finetune: args.finetune_id.clone(),
        masked_heads: mask.iter().collect(),
        accuracy: eval.accuracy,
    };
    write_text(&args.out, &eval_csv(&[row])?)?;
    rec.output(&args.out);
    if let Some(c) = &args.confusion {
        write_text(c, &confusion_csv(&eval.confusion, &inventory)?)?;
        rec.output(c);
    }
    println!("accuracy {:.4} over {} frames", eval.accuracy, eval.total_frames);
    rec.write(&beside(&args.out))
}

fn ablate(args: &AblateArgs) -> Result<()> {
    let mut rec = RunRecord::new("ablate", args, Some(args.seed))?;
    let manifest = load_manifest(&args.manifest, &mut rec)?;
    let (inventory, test) = manifest.load_all()?;
    rec.input(&args.probe)?;
    let probe = load_probe(&args.probe)?;
    let (weights, plan) = build_model(&args.model, args.seed, feature_dim(&manifest)?, &mut rec)?;
    let encoder = Encoder::new(&weights);
    let (scores, cats) = match &args.scores {
        Some(p) => read_scores(p, &mut rec)?,
        None => {
            let none = HeadMask::none();
            let dumps = test
                .par_iter()
                .map(|u| {
                    let ov = match &plan {
                        Some(p) => p.override_for(utterance_key(u.id()), u.num_frames())?,
                        None => AttentionOverride::default(),
                    };
                    Ok(encoder.forward(&u.features, &none, &ov)?.dump)
                })
                .collect::<attnprobe_core::Result<Vec<_>>>()?;
            let scores = score_heads(&dumps.iter().collect::<Vec<_>>())?;
            let cats = categorize(&scores)?;
            (scores, cats)
        }
    };
    let ranked = rank_heads(&scores, &cats, args.category)?;
    rec.resolve("ranked_heads", &ranked);
    let train;
    let config = probe_config(&args.probe_config, args.seed);
    let retrain = if args.retrain {
        let path = args.train_manifest.as_ref().expect("clap requires it");
        let m = load_manifest(path, &mut rec)?;
        train = load_entries(&m, &m.entries)?.1;
        Some((train.as_slice(), &config))
    } else {
        None
    };
    let setup = AblationSetup {
        encoder: &encoder,
        probe: &probe,
        inventory: &inventory,
        test: &test,
        injection: plan.as_ref(),
        retrain,
    };
    let curve = ablate_cumulative(&setup, args.category, &ranked)?;
    emit_curve(&curve, &args.out)?;
    rec.output(&args.out);
    println!(
        "{}: {} heads, unmasked {:.4}, all {} masked {:.4}, every head masked {:.4}",
        args.category,
        ranked.len(),
        curve.accuracy_at_step[0],
        args.category,
        curve.fully_masked(),
        curve.baseline_all_masked
    );
    rec.write(&beside(&args.out))
}

fn report(args: &ReportArgs) -> Result<()> {
    let mut rec = RunRecord::new("report", args, None)?;
    let (scores, cats) = read_scores(&args.scores, &mut rec)?;
    create_dir(&args.out_dir)?;
    let summary = summarize(&scores, &cats)?;
    let mut files = vec![
        ("summary.csv".to_string(), summary_csv(&summary)),
        ("layer_counts.csv".to_string(), layer_counts_csv(&cats)),
    ];
    for c in Category::ALL {
        files.push((format!("heatmap_{c}.csv"), heatmap_csv(&scores, c)));
    }
    for (name, text) in files {
        let path = args.out_dir.join(name);
        write_text(&path, &text)?;
        rec.output(path);
    }
    let c = summary.counts;
    println!("global {} vertical {} diagonal {}", c.global, c.vertical, c.diagonal);
    rec.write(&args.out_dir.join("run.json"))
}
