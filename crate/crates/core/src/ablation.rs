//! Cumulative head masking.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{LabeledUtterance, PhonemeInventory};
use crate::metrics::{Category, HeadCategory, HeadId, HeadScores};
use crate::model::{Encoder, HeadMask};
use crate::probe::{eval_probe, train_probe, ProbeConfig, ProbeModel, Representer};
use crate::synth::InjectionPlan;

/// Heads assigned to `category`, highest raw category score first, ties by
/// (layer, head).
pub fn rank_heads(scores: &[HeadScores], categories: &[HeadCategory], category: Category) -> Result<Vec<HeadId>> {
    if scores.len() != categories.len() || scores.iter().zip(categories).any(|(s, c)| s.head != c.head) {
        return Err(Error::ShapeMismatch("categories do not line up with scores".into()));
    }
    let mut picked: Vec<(f64, HeadId)> = scores
        .iter()
        .zip(categories)
        .filter(|(_, c)| c.category == category)
        .map(|(s, _)| (category.score_of(s), s.head))
        .collect();
    picked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok(picked.into_iter().map(|(_, h)| h).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationCurve {
    pub category: Category,
    pub heads: Vec<HeadId>,
    /// Entry `i` is the accuracy with the first `i` heads masked.
    pub accuracy_at_step: Vec<f64>,
    pub baseline_all_masked: f64,
}

impl AblationCurve {
    pub fn validate(&self) -> Result<()> {
        if self.accuracy_at_step.len() != self.heads.len() + 1 {
            return Err(Error::ShapeMismatch(format!(
                "{} heads need {} curve points, found {}",
                self.heads.len(),
                self.heads.len() + 1,
                self.accuracy_at_step.len()
            )));
        }
        let ok = |a: f64| (0.0..=1.0).contains(&a);
        if !self.accuracy_at_step.iter().all(|&a| ok(a)) || !ok(self.baseline_all_masked) {
            return Err(Error::ShapeMismatch("accuracy outside [0, 1]".into()));
        }
        Ok(())
    }

    /// Accuracy with every head of the category masked.
    pub fn fully_masked(&self) -> f64 {
        *self.accuracy_at_step.last().expect("curve has a step 0")
    }
}

/// What the probe sees and, with `retrain`, how it is refit under each mask.
pub struct AblationSetup<'a> {
    pub encoder: &'a Encoder,
    pub probe: &'a ProbeModel,
    pub inventory: &'a PhonemeInventory,
    pub test: &'a [LabeledUtterance],
    pub injection: Option<&'a InjectionPlan>,
    pub retrain: Option<(&'a [LabeledUtterance], &'a ProbeConfig)>,
}

impl AblationSetup<'_> {
    /// Probe accuracy on the test set under `mask`.
    pub fn accuracy(&self, mask: &HeadMask) -> Result<f64> {
        let representer = Representer::Encoder { encoder: self.encoder, mask, injection: self.injection };
        let retrained;
        let probe = match self.retrain {
            Some((train, config)) if !mask.is_empty() => {
                retrained = train_probe(train, self.inventory, &representer, config)?;
                &retrained
            }
            _ => self.probe,
        };
        Ok(eval_probe(probe, self.inventory, self.test, &representer)?.accuracy)
    }
}

/// Evaluates the probe with the top `i` ranked heads masked for every
/// `i = 0..=N`, plus the all-heads-masked baseline.
pub fn ablate_cumulative(setup: &AblationSetup<'_>, category: Category, ranked: &[HeadId]) -> Result<AblationCurve> {
    let config = setup.encoder.config();
    if let Some(&h) = ranked.iter().find(|&&h| !config.contains(h)) {
        return Err(Error::HeadOutsideModel(h));
    }
    let mut mask = HeadMask::none();
    let mut accuracy_at_step = vec![setup.accuracy(&mask)?];
    for &h in ranked {
        mask.insert(h);
        let acc = setup.accuracy(&mask)?;
        log::info!("{category}: masked {} heads (last {h}), accuracy {acc:.4}", mask.len());
        accuracy_at_step.push(acc);
    }
    let baseline_all_masked = setup.accuracy(&HeadMask::all(config.num_layers, config.num_heads))?;
    Ok(AblationCurve { category, heads: ranked.to_vec(), accuracy_at_step, baseline_all_masked })
}

pub const CURVE_HEADER: &str = "category,step,masked_head,accuracy";

/// Step 0 has masked head `none`; the final row is the `baseline,all` row.
pub fn curve_csv(curve: &AblationCurve) -> Result<String> {
    curve.validate()?;
    let mut out = format!("{CURVE_HEADER}\n");
    let cat = curve.category;
    for (i, acc) in curve.accuracy_at_step.iter().enumerate() {
        let masked = if i == 0 { "none".to_string() } else { curve.heads[i - 1].to_string() };
        let _ = writeln!(out, "{cat},{i},{masked},{acc}");
    }
    let _ = writeln!(out, "{cat},baseline,all,{}", curve.baseline_all_masked);
    Ok(out)
}

pub fn emit_curve(curve: &AblationCurve, path: impl AsRef<Path>) -> Result<()> {
    crate::io::write_bytes(path.as_ref(), curve_csv(curve)?.as_bytes())
}

pub fn parse_curve(text: &str, origin: &Path) -> Result<AblationCurve> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end() == CURVE_HEADER => {}
        _ => return Err(Error::parse(origin, 1, format!("expected header `{CURVE_HEADER}`"))),
    }
    let mut category = None;
    let mut heads = Vec::new();
    let mut accuracy_at_step = Vec::new();
    let mut baseline = None;
    let mut last_line = 1;
    for (i, line) in lines {
        let line = line.trim_end();
        if line.is_empty() {
            continue;
        }
        last_line = i + 1;
        let bad = |m: String| Error::parse(origin, i + 1, m);
        if baseline.is_some() {
            return Err(bad("row after the baseline row".into()));
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 4 {
            return Err(bad(format!("expected 4 columns, found {}", cols.len())));
        }
        let cat: Category = cols[0].parse().map_err(bad)?;
        if *category.get_or_insert(cat) != cat {
            return Err(bad("mixed categories in one curve".into()));
        }
        let acc: f64 = cols[3].parse().map_err(|e| bad(format!("`{}`: {e}", cols[3])))?;
        if cols[1] == "baseline" {
            if cols[2] != "all" {
                return Err(bad("baseline row must mask `all`".into()));
            }
            baseline = Some(acc);
            continue;
        }
        let step: usize = cols[1].parse().map_err(|e| bad(format!("`{}`: {e}", cols[1])))?;
        if step != accuracy_at_step.len() {
            return Err(bad(format!("expected step {}, found {step}", accuracy_at_step.len())));
        }
        match (step, cols[2]) {
            (0, "none") => {}
            (0, other) => return Err(bad(format!("step 0 masks `{other}`, expected `none`"))),
            (_, h) => heads.push(h.parse().map_err(bad)?),
        }
        accuracy_at_step.push(acc);
    }
    let (Some(category), Some(baseline_all_masked)) = (category, baseline) else {
        return Err(Error::parse(origin, last_line, "curve lacks a step 0 or baseline row"));
    };
    let curve = AblationCurve { category, heads, accuracy_at_step, baseline_all_masked };
    curve.validate().map_err(|e| Error::parse(origin, last_line, e.to_string()))?;
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::{FeatureMatrix, FrameLabels};
    use crate::model::{init_weights, ModelConfig};
    use crate::probe::{train_on_frames, frame_set};
    use ndarray::Array2;

    fn score(l: usize, h: usize, d: f64) -> (HeadScores, HeadCategory) {
        let head = HeadId::new(l, h);
        (
            HeadScores { head, globalness: 0.0, verticality: 0.0, diagonalness: d, utterance_count: 1 },
            HeadCategory { head, category: Category::Diagonal, z_scores: [0.0; 3] },
        )
    }

    #[test]
    fn ranking_sorts_descending_with_ties_by_position() {
        let rows = [score(0, 0, -0.2), score(0, 1, -0.1), score(1, 0, -0.15), score(1, 1, -0.1)];
        let (s, c): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
        let ranked = rank_heads(&s, &c, Category::Diagonal).unwrap();
        assert_eq!(ranked, vec![HeadId::new(0, 1), HeadId::new(1, 1), HeadId::new(1, 0), HeadId::new(0, 0)]);
        assert!(rank_heads(&s, &c, Category::Vertical).unwrap().is_empty());
    }

    fn curve(n: usize) -> AblationCurve {
        AblationCurve {
            category: Category::Diagonal,
            heads: (0..n).map(|h| HeadId::new(h / 4, h % 4)).collect(),
            accuracy_at_step: (0..=n).map(|i| 0.9 - 0.05 * i as f64 / 3.0).collect(),
            baseline_all_masked: 0.446,
        }
    }

    #[test]
    fn csv_round_trip_and_lengths() {
        let c = curve(12);
        let text = curve_csv(&c).unwrap();
        assert_eq!(text.lines().count(), 1 + 13 + 1);
        assert!(text.lines().nth(1).unwrap().starts_with("diagonal,0,none,"));
        assert!(text.lines().last().unwrap().starts_with("diagonal,baseline,all,"));
        assert_eq!(parse_curve(&text, Path::new("c.csv")).unwrap(), c);
    }

    #[test]
    fn empty_category_has_step_zero_and_baseline() {
        let c = AblationCurve { category: Category::Vertical, heads: vec![], accuracy_at_step: vec![0.8], baseline_all_masked: 0.5 };
        let text = curve_csv(&c).unwrap();
        assert_eq!(text, "category,step,masked_head,accuracy\nvertical,0,none,0.8\nvertical,baseline,all,0.5\n");
        assert_eq!(parse_curve(&text, Path::new("c.csv")).unwrap(), c);
    }

    #[test]
    fn malformed_curves() {
        let p = Path::new("c.csv");
        assert!(parse_curve("category,step,masked_head,accuracy\n", p).is_err());
        let skipped = "category,step,masked_head,accuracy\nglobal,0,none,0.5\nglobal,2,0:1,0.5\nglobal,baseline,all,0.1\n";
        assert!(matches!(parse_curve(skipped, p), Err(Error::Parse { line: 3, .. })));
        let mixed = "category,step,masked_head,accuracy\nglobal,0,none,0.5\nvertical,1,0:1,0.5\n";
        assert!(parse_curve(mixed, p).is_err());
        let bad = AblationCurve { accuracy_at_step: vec![1.2], ..curve(0) };
        assert!(curve_csv(&bad).is_err());
    }

    fn tiny_setup() -> (Encoder, PhonemeInventory, Vec<LabeledUtterance>) {
        let config = ModelConfig { num_layers: 1, num_heads: 2, model_dim: 8, feedforward_dim: 16, feature_dim: 3, max_frames: 64, seed: 0 };
        let weights = init_weights(&config, 5).unwrap();
        let inv = PhonemeInventory::new(["sil", "unk", "a"]).unwrap();
        let utts = (0..3)
            .map(|u| {
                let t = 6 + u;
                let labels: Vec<usize> = (0..t).map(|i| (i + u) % 3).collect();
                let feats = Array2::from_shape_fn((t, 3), |(i, j)| if labels[i] == j { 1.0f32 } else { 0.0 });
                LabeledUtterance::new(FeatureMatrix::new(format!("u{u}"), feats).unwrap(), FrameLabels::new(format!("u{u}"), labels))
                    .unwrap()
            })
            .collect();
        (Encoder::new(&weights), inv, utts)
    }

    #[test]
    fn step_zero_equals_unmasked_evaluation() {
        let (encoder, inv, utts) = tiny_setup();
        let none = HeadMask::none();
        let rep = Representer::Encoder { encoder: &encoder, mask: &none, injection: None };
        let cfg = ProbeConfig { num_steps: 300, batch_size: 16, ..ProbeConfig::default() };
        let probe = train_on_frames(&frame_set(&utts, &rep).unwrap(), inv.len(), &cfg).unwrap();
        let unmasked = eval_probe(&probe, &inv, &utts, &rep).unwrap().accuracy;
        let setup = AblationSetup { encoder: &encoder, probe: &probe, inventory: &inv, test: &utts, injection: None, retrain: None };
        let ranked = [HeadId::new(0, 1), HeadId::new(0, 0)];
        let c = ablate_cumulative(&setup, Category::Global, &ranked).unwrap();
        assert_eq!(c.accuracy_at_step[0], unmasked);
        assert_eq!(c.accuracy_at_step.len(), 3);
        assert_eq!(c.fully_masked(), c.baseline_all_masked);
        assert_eq!(ablate_cumulative(&setup, Category::Global, &ranked).unwrap(), c);
        assert!(matches!(
            ablate_cumulative(&setup, Category::Global, &[HeadId::new(1, 0)]),
            Err(Error::HeadOutsideModel(_))
        ));
    }
}
