//! Tabular reports: head scores, category summaries, probe evaluations.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::io::PhonemeInventory;
use crate::metrics::{category_counts, Category, CategoryCounts, HeadCategory, HeadId, HeadScores};

/// Formats a float with at most 9 significant digits, trailing zeros dropped.
pub fn fmt_float(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let rounded: f64 = format!("{x:.8e}").parse().expect("formatted float parses");
    rounded.to_string()
}

pub const SCORES_HEADER: &str = "layer,head,globalness,verticality,diagonalness,category";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreRow {
    pub head: HeadId,
    pub globalness: f64,
    pub verticality: f64,
    pub diagonalness: f64,
    pub category: Option<Category>,
}

impl ScoreRow {
    pub fn scores(&self) -> HeadScores {
        HeadScores {
            head: self.head,
            globalness: self.globalness,
            verticality: self.verticality,
            diagonalness: self.diagonalness,
            utterance_count: 0,
        }
    }
}

/// One row per head; the category column is empty where none is given.
pub fn scores_csv(scores: &[HeadScores], categories: Option<&[HeadCategory]>) -> Result<String> {
    if let Some(c) = categories {
        if c.len() != scores.len() || c.iter().zip(scores).any(|(c, s)| c.head != s.head) {
            return Err(Error::ShapeMismatch("categories do not line up with scores".into()));
        }
    }
    let mut out = format!("{SCORES_HEADER}\n");
    for (i, s) in scores.iter().enumerate() {
        let cat = categories.map_or("", |c| c[i].category.as_str());
        let _ = writeln!(
            out,
            "{},{},{},{},{},{cat}",
            s.head.layer,
            s.head.head,
            fmt_float(s.globalness),
            fmt_float(s.verticality),
            fmt_float(s.diagonalness)
        );
    }
    Ok(out)
}

pub fn parse_scores_csv(text: &str, origin: &Path) -> Result<Vec<ScoreRow>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end() == SCORES_HEADER => {}
        _ => return Err(Error::parse(origin, 1, format!("expected header `{SCORES_HEADER}`"))),
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        let line = line.trim_end();
        if line.is_empty() {
            continue;
        }
        let bad = |m: String| Error::parse(origin, i + 1, m);
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 6 {
            return Err(bad(format!("expected 6 columns, found {}", cols.len())));
        }
        let int = |s: &str| s.parse::<usize>().map_err(|e| bad(format!("`{s}`: {e}")));
        let float = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("`{s}`: {e}")));
        let category = if cols[5].is_empty() { None } else { Some(cols[5].parse().map_err(bad)?) };
        rows.push(ScoreRow {
            head: HeadId::new(int(cols[0])?, int(cols[1])?),
            globalness: float(cols[2])?,
            verticality: float(cols[3])?,
            diagonalness: float(cols[4])?,
            category,
        });
    }
    Ok(rows)
}

/// Mean of each score, over every head and within each category.
#[derive(Debug, Clone, PartialEq)]
pub struct CategorySummary {
    pub counts: CategoryCounts,
    /// (G, V, D) averaged over all heads.
    pub all_heads: [f64; 3],
    /// (G, V, D) averaged over heads of each category, in `Category::ALL` order;
    /// `None` for an empty category.
    pub within: [Option<[f64; 3]>; 3],
}

fn mean3<'a>(it: impl Iterator<Item = &'a HeadScores>) -> Option<[f64; 3]> {
    let mut acc = [0.0; 3];
    let mut n = 0usize;
    for s in it {
        acc[0] += s.globalness;
        acc[1] += s.verticality;
        acc[2] += s.diagonalness;
        n += 1;
    }
    (n > 0).then(|| acc.map(|v| v / n as f64))
}

pub fn summarize(scores: &[HeadScores], categories: &[HeadCategory]) -> Result<CategorySummary> {
    if categories.len() != scores.len() || categories.iter().zip(scores).any(|(c, s)| c.head != s.head) {
        return Err(Error::ShapeMismatch("categories do not line up with scores".into()));
    }
    let within = Category::ALL.map(|cat| {
        mean3(scores.iter().zip(categories).filter(|(_, c)| c.category == cat).map(|(s, _)| s))
    });
    Ok(CategorySummary {
        counts: category_counts(categories),
        all_heads: mean3(scores.iter()).unwrap_or([0.0; 3]),
        within,
    })
}

/// `group,heads,globalness,verticality,diagonalness` with an `all` row
/// followed by one row per category (empty categories have empty cells).
pub fn summary_csv(summary: &CategorySummary) -> String {
    let mut out = String::from("group,heads,globalness,verticality,diagonalness\n");
    let row = |out: &mut String, name: &str, n: usize, v: Option<[f64; 3]>| {
        let cells = v.map_or([String::new(), String::new(), String::new()], |v| v.map(fmt_float));
        let _ = writeln!(out, "{name},{n},{},{},{}", cells[0], cells[1], cells[2]);
    };
    row(&mut out, "all", summary.counts.total(), Some(summary.all_heads));
    for (i, cat) in Category::ALL.iter().enumerate() {
        row(&mut out, cat.as_str(), summary.counts.get(*cat), summary.within[i]);
    }
    out
}

/// `layer,global,vertical,diagonal` head counts per layer.
pub fn layer_counts_csv(categories: &[HeadCategory]) -> String {
    let layers = categories.iter().map(|c| c.head.layer + 1).max().unwrap_or(0);
    let mut out = String::from("layer,global,vertical,diagonal\n");
    for l in 0..layers {
        let in_layer: Vec<HeadCategory> = categories.iter().filter(|c| c.head.layer == l).copied().collect();
        let c = category_counts(&in_layer);
        let _ = writeln!(out, "{l},{},{},{}", c.global, c.vertical, c.diagonal);
    }
    out
}

/// Layer × head grid of one metric (rows are layers).
pub fn heatmap_csv(scores: &[HeadScores], metric: Category) -> String {
    let layers = scores.iter().map(|s| s.head.layer + 1).max().unwrap_or(0);
    let heads = scores.iter().map(|s| s.head.head + 1).max().unwrap_or(0);
    let mut grid = vec![vec![String::new(); heads]; layers];
    for s in scores {
        grid[s.head.layer][s.head.head] = fmt_float(metric.score_of(s));
    }
    let mut out = String::from("layer");
    for h in 0..heads {
        let _ = write!(out, ",h{h}");
    }
    out.push('\n');
    for (l, row) in grid.iter().enumerate() {
        let _ = writeln!(out, "{l},{}", row.join(","));
    }
    out
}

pub const EVAL_HEADER: &str = "pretrain,finetune,masked_heads,accuracy";

/// One probe evaluation: which representation, which labeled data, what was masked.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub pretrain: String,
    pub finetune: String,
    pub masked_heads: Vec<HeadId>,
    pub accuracy: f64,
}

fn check_field(s: &str) -> Result<()> {
    if s.contains([',', '\n']) {
        return Err(Error::BadConfig(format!("`{s}` cannot appear in a CSV field")));
    }
    Ok(())
}

/// Masked heads are written `l:h` separated by spaces; accuracy keeps full precision.
pub fn eval_csv(rows: &[EvalRow]) -> Result<String> {
    let mut out = format!("{EVAL_HEADER}\n");
    for r in rows {
        check_field(&r.pretrain)?;
        check_field(&r.finetune)?;
        let masked: Vec<String> = r.masked_heads.iter().map(HeadId::to_string).collect();
        let _ = writeln!(out, "{},{},{},{}", r.pretrain, r.finetune, masked.join(" "), r.accuracy);
    }
    Ok(out)
}

pub fn parse_eval_csv(text: &str, origin: &Path) -> Result<Vec<EvalRow>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end() == EVAL_HEADER => {}
        _ => return Err(Error::parse(origin, 1, format!("expected header `{EVAL_HEADER}`"))),
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        let line = line.trim_end();
        if line.is_empty() {
            continue;
        }
        let bad = |m: String| Error::parse(origin, i + 1, m);
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 4 {
            return Err(bad(format!("expected 4 columns, found {}", cols.len())));
        }
        let masked_heads =
            cols[2].split_whitespace().map(|h| h.parse::<HeadId>().map_err(|e| bad(e.to_string()))).collect::<Result<_>>()?;
        let accuracy: f64 = cols[3].parse().map_err(|e| bad(format!("`{}`: {e}", cols[3])))?;
        if !(0.0..=1.0).contains(&accuracy) {
            return Err(bad(format!("accuracy {accuracy} outside [0, 1]")));
        }
        rows.push(EvalRow { pretrain: cols[0].into(), finetune: cols[1].into(), masked_heads, accuracy });
    }
    Ok(rows)
}

/// Rows are true labels, columns predictions.
pub fn confusion_csv(confusion: &Array2<u64>, inventory: &PhonemeInventory) -> Result<String> {
    let p = inventory.len();
    if confusion.dim() != (p, p) {
        return Err(Error::InventoryMismatch { probe: confusion.nrows(), inventory: p });
    }
    let mut out = String::from("true\\predicted");
    for s in inventory.symbols() {
        let _ = write!(out, ",{s}");
    }
    out.push('\n');
    for (m, s) in inventory.symbols().iter().enumerate() {
        out.push_str(s);
        for n in 0..p {
            let _ = write!(out, ",{}", confusion[[m, n]]);
        }
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::categorize;

    fn path() -> &'static Path {
        Path::new("t.csv")
    }

    #[test]
    fn float_format() {
        assert_eq!(fmt_float(0.7), "0.7");
        assert_eq!(fmt_float(-0.0), "0");
        assert_eq!(fmt_float(std::f64::consts::LN_2), "0.693147181");
        assert_eq!(fmt_float(-0.3125), "-0.3125");
        assert_eq!(fmt_float(4.1588830833596715), "4.15888308");
        assert_eq!(fmt_float(123456789012.0), "123456789000");
        assert_eq!(fmt_float(1.0), "1");
    }

    fn sample_scores() -> Vec<HeadScores> {
        (0..4)
            .map(|i| HeadScores {
                head: HeadId::new(i / 2, i % 2),
                globalness: [3.9, 1.0, 0.2, 2.5][i],
                verticality: [-3.9, -0.1, -3.0, -2.0][i],
                diagonalness: [-16.0, -20.0, -0.5, -9.0][i],
                utterance_count: 10,
            })
            .collect()
    }

    #[test]
    fn scores_round_trip() {
        let scores = sample_scores();
        let cats = categorize(&scores).unwrap();
        let text = scores_csv(&scores, Some(&cats)).unwrap();
        assert!(text.starts_with(SCORES_HEADER));
        assert_eq!(text.lines().count(), 5);
        let rows = parse_scores_csv(&text, path()).unwrap();
        for ((r, s), c) in rows.iter().zip(&scores).zip(&cats) {
            assert_eq!(r.head, s.head);
            assert_eq!(r.globalness, s.globalness);
            assert_eq!(r.category, Some(c.category));
        }
        let bare = scores_csv(&scores, None).unwrap();
        assert!(parse_scores_csv(&bare, path()).unwrap().iter().all(|r| r.category.is_none()));
    }

    #[test]
    fn scores_parse_errors() {
        assert!(matches!(parse_scores_csv("a,b\n", path()), Err(Error::Parse { line: 1, .. })));
        let text = format!("{SCORES_HEADER}\n0,0,1,2,3,global\n0,x,1,2,3,global\n");
        assert!(matches!(parse_scores_csv(&text, path()), Err(Error::Parse { line: 3, .. })));
    }

    #[test]
    fn summary_has_both_aggregations() {
        let scores = sample_scores();
        let cats = categorize(&scores).unwrap();
        let s = summarize(&scores, &cats).unwrap();
        assert_eq!(s.counts.total(), 4);
        assert!((s.all_heads[0] - 7.6 / 4.0).abs() < 1e-12);
        let csv = summary_csv(&s);
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.lines().nth(1).unwrap().starts_with("all,4,"));
    }

    #[test]
    fn layer_and_heatmap_grids() {
        let scores = sample_scores();
        let cats = categorize(&scores).unwrap();
        let lc = layer_counts_csv(&cats);
        assert_eq!(lc.lines().count(), 3);
        let hm = heatmap_csv(&scores, Category::Diagonal);
        assert_eq!(hm, "layer,h0,h1\n0,-16,-20\n1,-0.5,-9\n");
    }

    #[test]
    fn eval_row_fixture() {
        let text = "pretrain,finetune,masked_heads,accuracy\nEnglish-100,English,,0.7145705819\n";
        let rows = parse_eval_csv(text, path()).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].pretrain, "English-100");
        assert_eq!(rows[0].finetune, "English");
        assert!(rows[0].masked_heads.is_empty());
        assert_eq!(rows[0].accuracy, 0.7145705819);
        assert_eq!(eval_csv(&rows).unwrap(), text);
    }

    #[test]
    fn eval_rows_with_masks_round_trip() {
        let rows = vec![EvalRow {
            pretrain: "mini".into(),
            finetune: "synth".into(),
            masked_heads: vec![HeadId::new(0, 3), HeadId::new(2, 11)],
            accuracy: 0.25,
        }];
        let text = eval_csv(&rows).unwrap();
        assert!(text.contains("0:3 2:11"));
        assert_eq!(parse_eval_csv(&text, path()).unwrap(), rows);
        let bad = format!("{EVAL_HEADER}\na,b,,1.5\n");
        assert!(parse_eval_csv(&bad, path()).is_err());
    }

    #[test]
    fn confusion_layout() {
        let inv = PhonemeInventory::new(["sil", "unk"]).unwrap();
        let c = ndarray::array![[3u64, 1], [0, 2]];
        assert_eq!(confusion_csv(&c, &inv).unwrap(), "true\\predicted,sil,unk\nsil,3,1\nunk,0,2\n");
    }
}
