//! Synthetic stand-in corpus: two-class textured 32×32 "patches", free-text
//! reports, score tables and a scripted summarizer transcript, all from one
//! seed. Used by the toy pipeline, the examples and the acceptance suite.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{write_reports, write_scores, ReportRow, ScoreLabel, ScoreRow};
use crate::error::{Error, IoContext, Result};
use crate::textcond::Tokenizer;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_cases: usize,
    pub patches_per_case: usize,
    pub image_size: u32,
    pub seed: u64,
    /// Probability that a patch's label differs from its case's.
    pub label_noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_cases: 100,
            patches_per_case: 20,
            image_size: 32,
            seed: 0,
            label_noise: 0.1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub image_dir: PathBuf,
    pub reports_csv: PathBuf,
    pub scores_csv: PathBuf,
    /// `{case_id: [responses...]}` for the scripted completion client.
    pub mock_script: PathBuf,
}

/// Token targets of the scripted responses, longest first. Each fits the
/// budget it is paired with: 150, 50, 35 and 20.
pub const SCRIPT_LENGTHS: [usize; 4] = [140, 48, 33, 18];

fn flip(rng: &mut ChaCha8Rng, label: ScoreLabel, p: f64) -> ScoreLabel {
    if rng.random::<f64>() < p {
        match label {
            ScoreLabel::Low => ScoreLabel::High,
            ScoreLabel::High => ScoreLabel::Low,
        }
    } else {
        label
    }
}

fn label(rng: &mut ChaCha8Rng) -> ScoreLabel {
    if rng.random::<bool>() {
        ScoreLabel::High
    } else {
        ScoreLabel::Low
    }
}

fn blend(px: &mut Rgb<u8>, c: [f64; 3], a: f64) {
    for k in 0..3 {
        px.0[k] = (px.0[k] as f64 * (1.0 - a) + c[k] * a).round().clamp(0.0, 255.0) as u8;
    }
}

fn disc(img: &mut RgbImage, cx: f64, cy: f64, r: f64, c: [f64; 3]) {
    let (w, h) = img.dimensions();
    let x0 = (cx - r - 1.0).floor().max(0.0) as u32;
    let y0 = (cy - r - 1.0).floor().max(0.0) as u32;
    let x1 = ((cx + r + 1.0).ceil() as u32).min(w - 1);
    let y1 = ((cy + r + 1.0).ceil() as u32).min(h - 1);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let d = ((x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2)).sqrt();
            let a = (r + 0.5 - d).clamp(0.0, 1.0);
            if a > 0.0 {
                blend(img.get_pixel_mut(x, y), c, a * 0.9);
            }
        }
    }
}

/// One patch. High tumour: dense large purple nuclei. Low tumour: pink
/// stromal fibres with sparse nuclei. High TIL adds many small dark dots.
pub fn render_patch(rng: &mut ChaCha8Rng, tumour: ScoreLabel, til: ScoreLabel, size: u32) -> RgbImage {
    let s = size as f64;
    let mut img = RgbImage::new(size, size);
    let angle = rng.random::<f64>() * std::f64::consts::PI;
    let freq = 0.5 + rng.random::<f64>() * 0.3;
    let phase = rng.random::<f64>() * 6.3;
    let (ca, sa) = (angle.cos(), angle.sin());
    for (x, y, px) in img.enumerate_pixels_mut() {
        let u = x as f64 * ca + y as f64 * sa;
        let fibre = match tumour {
            ScoreLabel::Low => 0.5 + 0.5 * (u * freq + phase).sin(),
            ScoreLabel::High => 0.15,
        };
        let base = [236.0 - 40.0 * fibre, 190.0 - 70.0 * fibre, 212.0 - 40.0 * fibre];
        for k in 0..3 {
            let jitter: f64 = rng.random::<f64>() * 12.0 - 6.0;
            px.0[k] = (base[k] + jitter).clamp(0.0, 255.0) as u8;
        }
    }
    let area = s * s / 1024.0;
    let (n_nuclei, radius) = match tumour {
        ScoreLabel::High => ((22.0 * area) as usize, 2.6),
        ScoreLabel::Low => ((4.0 * area) as usize, 1.8),
    };
    for _ in 0..n_nuclei {
        let (cx, cy) = (rng.random::<f64>() * s, rng.random::<f64>() * s);
        let r = radius * (0.8 + 0.4 * rng.random::<f64>());
        disc(&mut img, cx, cy, r, [110.0, 50.0, 150.0]);
    }
    let n_til = match til {
        ScoreLabel::High => (18.0 * area) as usize,
        ScoreLabel::Low => (2.0 * area) as usize,
    };
    for _ in 0..n_til {
        let (cx, cy) = (rng.random::<f64>() * s, rng.random::<f64>() * s);
        disc(&mut img, cx, cy, 0.9, [35.0, 25.0, 85.0]);
    }
    img
}

const SITES: [&str; 4] = ["left breast", "right breast", "left axilla", "right breast, upper outer quadrant"];
const PROCEDURES: [&str; 3] = ["core needle biopsy", "wide local excision", "mastectomy"];

fn report(rng: &mut ChaCha8Rng, case_id: &str, tumour: ScoreLabel, til: ScoreLabel) -> String {
    let site = SITES[rng.random_range(0..SITES.len())];
    let proc_ = PROCEDURES[rng.random_range(0..PROCEDURES.len())];
    let size_mm = rng.random_range(8..45);
    let grade = rng.random_range(1..4);
    let nodes = rng.random_range(0..12);
    let positive = rng.random_range(0..=nodes.min(3));
    let cellularity = match tumour {
        ScoreLabel::High => "Tumour cellularity is high with sheets of pleomorphic cells and frequent mitoses",
        ScoreLabel::Low => "Tumour cellularity is low; the lesion is dominated by desmoplastic fibrous stroma with scattered nests",
    };
    let lymph = match til {
        ScoreLabel::High => "There is a brisk stromal lymphocytic infiltrate surrounding tumour nests",
        ScoreLabel::Low => "Tumour-infiltrating lymphocytes are sparse",
    };
    format!(
        "SURGICAL PATHOLOGY REPORT. Case {case_id}. Specimen: {site}, {proc_}. \
         Gross description: received in formalin, a portion of fibrofatty tissue measuring {a} x {b} x {c} cm \
         containing a firm stellate lesion of {size_mm} mm. Microscopic description: invasive ductal carcinoma, \
         no special type, Nottingham grade {grade}. {cellularity}. {lymph}. Ductal carcinoma in situ, \
         {dcis} pattern, is present adjacent to the invasive component. Lymphovascular invasion is {lvi}. \
         Margins: the closest margin is {margin} mm. Lymph nodes: {positive} of {nodes} nodes involved. \
         Immunohistochemistry: ER {er}, PR {pr}, HER2 {her2}. Final diagnosis: invasive carcinoma of the breast.",
        a = rng.random_range(2..9),
        b = rng.random_range(2..7),
        c = rng.random_range(1..4),
        dcis = ["cribriform", "solid", "micropapillary"][rng.random_range(0..3)],
        lvi = ["not identified", "present", "suspicious"][rng.random_range(0..3)],
        margin = rng.random_range(1..15),
        er = ["positive", "negative"][rng.random_range(0..2)],
        pr = ["positive", "negative"][rng.random_range(0..2)],
        her2 = ["0", "1+", "2+", "3+"][rng.random_range(0..4)],
    )
}

/// Summary-like text of at most `target` tokens under `tok`, built from
/// the report's findings.
fn scripted_summary(tok: &Tokenizer, report: &str, target: usize) -> String {
    let sentences: Vec<&str> = report
        .split(". ")
        .filter(|s| !s.starts_with("SURGICAL") && !s.starts_with("Case "))
        .collect();
    let mut words: Vec<&str> = Vec::new();
    'fill: loop {
        for s in &sentences {
            for w in s.split_whitespace() {
                words.push(w);
                if words.len() > target * 2 {
                    break 'fill;
                }
            }
        }
    }
    while words.len() > 1 && tok.count_tokens(&words.join(" ")) > target {
        words.pop();
    }
    let mut out = words.join(" ");
    if out.ends_with(',') || out.ends_with(':') || out.ends_with(';') {
        out.pop();
    }
    out
}

/// Writes images, tables and the mock script under `out_dir`.
pub fn generate(out_dir: &Path, cfg: &SynthConfig) -> Result<SynthDataset> {
    if cfg.n_cases == 0 || cfg.patches_per_case == 0 || cfg.image_size < 8 {
        return Err(Error::Config("synthetic corpus needs cases, patches and image_size ≥ 8".into()));
    }
    let image_dir = out_dir.join("images");
    std::fs::create_dir_all(&image_dir).at(&image_dir)?;
    let tok = Tokenizer::bundled();
    let mut reports = Vec::new();
    let mut scores = Vec::new();
    let mut script: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for c in 0..cfg.n_cases {
        let case_id = format!("CASE-{c:04}");
        let mut rng = crate::rng::stream(cfg.seed, "synth-case", c as u64);
        let (tumour, til) = (label(&mut rng), label(&mut rng));
        let text = report(&mut rng, &case_id, tumour, til);
        script.insert(
            case_id.clone(),
            SCRIPT_LENGTHS.iter().map(|&n| scripted_summary(&tok, &text, n)).collect(),
        );
        reports.push(ReportRow {
            case_id: case_id.clone(),
            report_text: text,
        });
        let case_dir = image_dir.join(&case_id);
        std::fs::create_dir_all(&case_dir).at(&case_dir)?;
        for p in 0..cfg.patches_per_case {
            let patch_id = format!("{case_id}-P{p:03}");
            let mut prng = crate::rng::stream(cfg.seed, &format!("synth-patch/{case_id}"), p as u64);
            let t = flip(&mut prng, tumour, cfg.label_noise);
            let l = flip(&mut prng, til, cfg.label_noise);
            let img = render_patch(&mut prng, t, l, cfg.image_size);
            let path = case_dir.join(format!("{patch_id}.png"));
            img.save(&path).map_err(|e| Error::Image {
                path: path.clone(),
                message: e.to_string(),
            })?;
            scores.push(ScoreRow {
                patch_id,
                case_id: case_id.clone(),
                tumor: t.to_string(),
                til: l.to_string(),
            });
        }
    }
    let reports_csv = out_dir.join("reports.csv");
    let scores_csv = out_dir.join("scores.csv");
    let mock_script = out_dir.join("mock_responses.json");
    write_reports(&reports_csv, &reports)?;
    write_scores(&scores_csv, &scores)?;
    std::fs::write(&mock_script, serde_json::to_vec_pretty(&script)?).at(&mock_script)?;
    Ok(SynthDataset {
        image_dir,
        reports_csv,
        scores_csv,
        mock_script,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classes_differ_in_darkness() {
        let mean = |t, l| {
            let mut total = 0.0;
            for i in 0..20 {
                let mut rng = crate::rng::stream(0, "t", i);
                let img = render_patch(&mut rng, t, l, 32);
                total += img.pixels().map(|p| p.0[0] as f64).sum::<f64>() / 1024.0;
            }
            total / 20.0
        };
        let hi = mean(ScoreLabel::High, ScoreLabel::Low);
        let lo = mean(ScoreLabel::Low, ScoreLabel::Low);
        assert!(hi < lo - 10.0, "{hi} vs {lo}");
        assert!(mean(ScoreLabel::Low, ScoreLabel::High) < lo);
    }

    #[test]
    fn generation_is_deterministic_and_scripts_fit_their_budgets() {
        let cfg = SynthConfig {
            n_cases: 3,
            patches_per_case: 2,
            ..Default::default()
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let da = generate(a.path(), &cfg).unwrap();
        let db = generate(b.path(), &cfg).unwrap();
        for (x, y) in [(&da.scores_csv, &db.scores_csv), (&da.reports_csv, &db.reports_csv), (&da.mock_script, &db.mock_script)] {
            assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
        }
        let p = "CASE-0001/CASE-0001-P001.png";
        assert_eq!(
            std::fs::read(da.image_dir.join(p)).unwrap(),
            std::fs::read(db.image_dir.join(p)).unwrap()
        );
        let script: BTreeMap<String, Vec<String>> =
            serde_json::from_slice(&std::fs::read(&da.mock_script).unwrap()).unwrap();
        let tok = Tokenizer::bundled();
        for responses in script.values() {
            for (r, n) in responses.iter().zip(SCRIPT_LENGTHS) {
                let len = tok.count_tokens(r);
                assert!(len <= n && len + 4 >= n, "{len} vs {n}: {r}");
            }
        }
        let reports = crate::corpus::read_reports(&da.reports_csv).unwrap();
        assert!(reports.values().all(|r| tok.count_tokens(r) > 154));
    }
}
