use attnprobe_core::io::{read_manifest, AttentionDump};
use attnprobe_core::metrics::score_heads;
use attnprobe_core::model::{init_weights, AttentionOverride, Encoder, HeadMask, ModelConfig};
use attnprobe_core::prm::{prm_aggregate, HeadSelection};
use attnprobe_core::probe::utterance_key;
use attnprobe_core::synth::write_dataset;
use attnprobe_core::{categorize, generate_dataset, Category, HeadId, InjectionPlan, SynthDatasetConfig};

fn injected_dumps(seed: u64) -> (attnprobe_core::synth::SynthDataset, InjectionPlan, Vec<AttentionDump>) {
    let ds = generate_dataset(&SynthDatasetConfig { num_utterances: 6, seed, ..Default::default() }).unwrap();
    let config = ModelConfig { seed, ..Default::default() };
    let encoder = Encoder::new(&init_weights(&config, seed).unwrap());
    let plan = InjectionPlan::from_battery(config.num_layers, config.num_heads, 12, seed).unwrap();
    let dumps = ds
        .utterances
        .iter()
        .map(|u| {
            let ov = plan.override_for(utterance_key(u.id()), u.num_frames()).unwrap();
            encoder.forward(&u.features, &HeadMask::none(), &ov).unwrap().dump
        })
        .collect();
    (ds, plan, dumps)
}

#[test]
fn injected_heads_are_categorized_as_planned() {
    let (_, plan, dumps) = injected_dumps(11);
    let scores = score_heads(&dumps.iter().collect::<Vec<_>>()).unwrap();
    let cats = categorize(&scores).unwrap();
    for c in &cats {
        assert_eq!(Some(c.category), plan.category_of(c.head), "{}", c.head);
    }
}

#[test]
fn diagonal_heads_make_phones_relate_to_themselves() {
    let (ds, plan, dumps) = injected_dumps(12);
    let layer = 1;
    let diag: Vec<usize> = plan
        .heads
        .iter()
        .filter(|(h, s)| h.layer == layer && s.kind.category() == Category::Diagonal)
        .map(|(h, _)| h.head)
        .collect();
    assert!(!diag.is_empty());
    let pairs: Vec<_> = dumps.iter().zip(ds.utterances.iter().map(|u| &u.labels)).collect();
    let prm = prm_aggregate(&pairs, &ds.inventory, layer, &HeadSelection::Only(diag), usize::MAX).unwrap();
    assert_eq!(prm.self_relation_fraction(), Some(1.0));
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let (_, _, dumps) = injected_dumps(13);
    let refs: Vec<_> = dumps.iter().collect();
    let run = |n| {
        rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap().install(|| score_heads(&refs).unwrap())
    };
    let one = run(1);
    assert_eq!(one, run(4));
}

#[test]
fn dataset_survives_a_trip_through_disk() {
    let ds = generate_dataset(&SynthDatasetConfig { num_utterances: 4, seed: 3, ..Default::default() }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = write_dataset(&ds, dir.path()).unwrap();
    let manifest = read_manifest(&path).unwrap();
    manifest.validate().unwrap();
    let (inventory, utts) = manifest.load_all().unwrap();
    assert_eq!(inventory, ds.inventory);
    assert_eq!(utts, ds.utterances);
}

#[test]
fn masking_every_head_discards_overrides() {
    let (ds, plan, _) = injected_dumps(14);
    let config = ModelConfig { seed: 14, ..Default::default() };
    let encoder = Encoder::new(&init_weights(&config, 14).unwrap());
    let u = &ds.utterances[0];
    let all = HeadMask::all(config.num_layers, config.num_heads);
    let ov = plan.override_for(utterance_key(u.id()), u.num_frames()).unwrap();
    let with = encoder.represent(&u.features, &all, &ov).unwrap();
    let without = encoder.represent(&u.features, &all, &AttentionOverride::default()).unwrap();
    assert_eq!(with, without);
    assert!(config.contains(HeadId::new(2, 11)));
}
