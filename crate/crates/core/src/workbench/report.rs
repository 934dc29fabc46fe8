use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{RunConfig, SegmentKind};
use super::pipeline::{read_json, ScoreRow};
use crate::error::{Error, Result};
use crate::scalar::{aggregate, compare, AblationCurve, Estimate, Reference};

pub const SCORE_HEADER: [&str; 6] = ["variant", "layer", "absolute", "abs_sem", "relative", "rel_sem"];
pub const REDUCTION_HEADER: [&str; 7] = ["baseline", "candidate", "layer", "absolute", "abs_sem", "relative", "rel_sem"];

/// Percentage reduction of a candidate against a baseline at one layer, or
/// summed over layers when `layer` is `None`. Positive means the candidate
/// scores lower, i.e. is sparser.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reduction {
    pub baseline: String,
    pub candidate: String,
    pub segment: SegmentKind,
    pub reference: Reference,
    pub layer: Option<usize>,
    pub absolute: Estimate,
    pub relative: Estimate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub scores: Vec<ScoreRow>,
    pub reductions: Vec<Reduction>,
    pub uncertainty: String,
}

fn reference_name(r: Reference) -> &'static str {
    match r {
        Reference::FullModel => "full_model",
        Reference::FullCircuit => "full_circuit",
    }
}

/// Reductions for every configured comparison, segment kind and reference.
pub fn reductions(rows: &[ScoreRow], comparisons: &[(String, String)]) -> Result<Vec<Reduction>> {
    let mut out = Vec::new();
    let mut groups: Vec<(SegmentKind, Reference)> = rows.iter().map(|r| (r.segment, r.reference)).collect();
    groups.sort_by_key(|&(s, r)| (s, reference_name(r)));
    groups.dedup();
    for (base, cand) in comparisons {
        for &(segment, reference) in &groups {
            let pick = |v: &str| -> Vec<&ScoreRow> {
                let mut r: Vec<&ScoreRow> = rows
                    .iter()
                    .filter(|r| r.variant == v && r.segment == segment && r.reference == reference)
                    .collect();
                r.sort_by_key(|r| r.layer);
                r
            };
            let (a, b) = (pick(base), pick(cand));
            let layers: Vec<usize> = a.iter().map(|r| r.layer).filter(|l| b.iter().any(|r| r.layer == *l)).collect();
            if layers.is_empty() {
                continue;
            }
            let est = |r: &ScoreRow| {
                (
                    Estimate { value: r.absolute, sem: r.abs_sem },
                    Estimate { value: r.relative, sem: r.rel_sem },
                )
            };
            let mut abs_a = Vec::new();
            let mut abs_b = Vec::new();
            let mut rel_a = Vec::new();
            let mut rel_b = Vec::new();
            for &l in &layers {
                let (xa, ra) = est(at(&a, l));
                let (xb, rb) = est(at(&b, l));
                out.push(Reduction {
                    baseline: base.clone(),
                    candidate: cand.clone(),
                    segment,
                    reference,
                    layer: Some(l),
                    absolute: compare(xa, xb)?,
                    relative: compare(ra, rb)?,
                });
                abs_a.push(xa);
                abs_b.push(xb);
                rel_a.push(ra);
                rel_b.push(rb);
            }
            out.push(Reduction {
                baseline: base.clone(),
                candidate: cand.clone(),
                segment,
                reference,
                layer: None,
                absolute: aggregate(&abs_a, &abs_b)?,
                relative: aggregate(&rel_a, &rel_b)?,
            });
        }
    }
    Ok(out)
}

fn at<'a>(v: &[&'a ScoreRow], l: usize) -> &'a ScoreRow {
    v.iter().find(|r| r.layer == l).expect("layer present")
}

fn write_csv(path: &Path, header: &[&str], rows: Vec<Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn num(v: f64) -> String {
    format!("{v:.6e}")
}

/// A log-x line plot with one polyline per curve.
pub fn svg_plot(title: &str, curves: &[(String, &AblationCurve)]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const L: f64 = 70.0;
    const R: f64 = 160.0;
    const T: f64 = 40.0;
    const B: f64 = 50.0;
    let xmax = curves.iter().flat_map(|(_, c)| c.edges.iter()).copied().max().unwrap_or(1).max(2) as f64;
    let ymax = curves
        .iter()
        .flat_map(|(_, c)| c.mean_kl.iter())
        .copied()
        .fold(0.0, f64::max)
        .max(1e-12);
    let px = |e: usize| L + (e.max(1) as f64).log10() / xmax.log10() * (W - L - R);
    let py = |y: f64| H - B - y / ymax * (H - T - B);
    let colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf"];
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#, (W - R + L) / 2.0, escape(title));
    let _ = writeln!(s, r#"<line x1="{L}" y1="{0}" x2="{1}" y2="{0}" stroke="black"/>"#, H - B, W - R);
    let _ = writeln!(s, r#"<line x1="{L}" y1="{T}" x2="{L}" y2="{}" stroke="black"/>"#, H - B);
    let mut decade = 1usize;
    while decade as f64 <= xmax {
        let x = px(decade);
        let _ = writeln!(s, r#"<text x="{x:.1}" y="{}" text-anchor="middle" font-size="11">1e{}</text>"#, H - B + 16.0, decade.ilog10());
        decade *= 10;
    }
    for i in 0..=4 {
        let y = ymax * i as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end" font-size="11">{y:.3}</text>"#, L - 6.0, py(y) + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle" font-size="13">edges retained (log scale)</text>"#, (W - R + L) / 2.0, H - 10.0);
    let _ = writeln!(s, r#"<text x="16" y="{0}" text-anchor="middle" font-size="13" transform="rotate(-90 16 {0})">mean KL divergence</text>"#, (H - B + T) / 2.0);
    for (i, (label, c)) in curves.iter().enumerate() {
        let color = colors[i % colors.len()];
        let pts: Vec<String> = c.edges.iter().zip(&c.mean_kl).map(|(&e, &y)| format!("{:.2},{:.2}", px(e), py(y))).collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, pts.join(" "));
        let ly = T + 18.0 * i as f64 + 10.0;
        let _ = writeln!(s, r#"<line x1="{0}" y1="{ly}" x2="{1}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, W - R + 12.0, W - R + 32.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="12">{}</text>"#, W - R + 38.0, ly + 4.0, escape(label));
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Writes the CSV, JSON and SVG reports under `out/report` and returns
/// their paths relative to `out`.
pub fn write_report(out: &Path, config: &RunConfig) -> Result<Vec<String>> {
    let rows: Vec<ScoreRow> = read_json(&out.join("scalar/scores.json"))?;
    let dir = out.join("report");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut written = Vec::new();
    let reds = reductions(&rows, &config.scalar.comparisons)?;

    let mut groups: Vec<(SegmentKind, Reference)> = rows.iter().map(|r| (r.segment, r.reference)).collect();
    groups.sort_by_key(|&(s, r)| (s, reference_name(r)));
    groups.dedup();
    for &(seg, reference) in &groups {
        let tag = format!("{}_{}", seg.name(), reference_name(reference));
        let table: Vec<Vec<String>> = rows
            .iter()
            .filter(|r| r.segment == seg && r.reference == reference)
            .map(|r| vec![r.variant.clone(), r.layer.to_string(), num(r.absolute), num(r.abs_sem), num(r.relative), num(r.rel_sem)])
            .collect();
        let rel = format!("report/scalar_{tag}.csv");
        write_csv(&out.join(&rel), &SCORE_HEADER, table)?;
        written.push(rel);

        let red: Vec<Vec<String>> = reds
            .iter()
            .filter(|r| r.segment == seg && r.reference == reference)
            .map(|r| {
                vec![
                    r.baseline.clone(),
                    r.candidate.clone(),
                    r.layer.map_or("all".into(), |l| l.to_string()),
                    format!("{:.2}", r.absolute.value),
                    format!("{:.2}", r.absolute.sem),
                    format!("{:.2}", r.relative.value),
                    format!("{:.2}", r.relative.sem),
                ]
            })
            .collect();
        if !red.is_empty() {
            let rel = format!("report/reduction_{tag}.csv");
            write_csv(&out.join(&rel), &REDUCTION_HEADER, red)?;
            written.push(rel);
        }

        let mut layers: Vec<usize> = rows.iter().filter(|r| r.segment == seg).map(|r| r.layer).collect();
        layers.sort_unstable();
        layers.dedup();
        for layer in layers {
            let mut curves = Vec::new();
            for label in config.scored_variants() {
                let path = out.join(format!("curves/{label}.{}.json", seg.at(layer)));
                if !path.exists() {
                    continue;
                }
                let cs: Vec<AblationCurve> = read_json(&path)?;
                if let Some(c) = cs.into_iter().find(|c| c.reference == reference) {
                    curves.push((label, c));
                }
            }
            if curves.is_empty() {
                continue;
            }
            let refs: Vec<(String, &AblationCurve)> = curves.iter().map(|(l, c)| (l.clone(), c)).collect();
            let title = format!("{} ({})", seg.at(layer), reference_name(reference).replace('_', " "));
            let rel = format!("report/curves_{}_{layer}_{}.svg", seg.name(), reference_name(reference));
            std::fs::write(out.join(&rel), svg_plot(&title, &refs)).map_err(|e| Error::io(out.join(&rel), e))?;
            written.push(rel);
        }
    }

    let report = Report {
        scores: rows,
        reductions: reds,
        uncertainty: "± values are standard errors of the per-prompt areas; reductions propagate them to first order".into(),
    };
    let rel = "report/report.json".to_string();
    std::fs::write(out.join(&rel), serde_json::to_string_pretty(&report)? + "\n").map_err(|e| Error::io(out.join(&rel), e))?;
    written.push(rel);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(variant: &str, layer: usize, abs: f64, rel: f64) -> ScoreRow {
        ScoreRow {
            variant: variant.into(),
            segment: SegmentKind::FfBlock,
            layer,
            reference: Reference::FullModel,
            absolute: abs,
            abs_sem: 0.1,
            relative: rel,
            rel_sem: 0.01,
            total_edges: 100,
            prompts: 10,
        }
    }

    fn curve(edges: Vec<usize>, kl: Vec<f64>) -> AblationCurve {
        AblationCurve {
            reference: Reference::FullModel,
            total_edges: *edges.last().unwrap(),
            per_prompt: kl.iter().map(|&k| vec![k]).collect(),
            mean_kl: kl,
            edges,
        }
    }

    #[test]
    fn reduction_sign_follows_the_candidate() {
        let rows = vec![row("a", 0, 10.0, 1.0), row("b", 0, 8.0, 1.2), row("a", 1, 5.0, 0.5), row("b", 1, 6.0, 0.3)];
        let r = reductions(&rows, &[("a".into(), "b".into())]).unwrap();
        assert_eq!(r.len(), 3);
        assert!(r[0].absolute.value > 0.0 && r[0].relative.value < 0.0);
        assert!(r[1].absolute.value < 0.0 && r[1].relative.value > 0.0);
        let all = &r[2];
        assert_eq!(all.layer, None);
        assert!((all.absolute.value - 100.0 * (15.0 - 14.0) / 15.0).abs() < 1e-12);
    }

    #[test]
    fn svg_is_well_formed_with_one_polyline_per_curve() {
        let a = curve(vec![1, 2, 4, 8, 100], vec![1.0, 0.8, 0.5, 0.2, 0.01]);
        let b = curve(vec![1, 3, 9, 100], vec![1.2, 0.6, 0.3, 0.02]);
        let svg = svg_plot("block <0> & more", &[("topk".into(), &a), ("staircase".into(), &b)]);
        let doc = roxmltree::Document::parse(&svg).unwrap();
        let polylines: Vec<_> = doc.descendants().filter(|n| n.has_tag_name("polyline")).collect();
        assert_eq!(polylines.len(), 2);
        assert_eq!(polylines[0].attribute("points").unwrap().split(' ').count(), 5);
        assert!(doc.descendants().any(|n| n.text() == Some("staircase")));
        assert!(doc.descendants().any(|n| n.text() == Some("edges retained (log scale)")));
    }
}
