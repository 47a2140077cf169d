//! Self-contained SVG error-versus-cost plots and QQ data from a run directory.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use mlsa_core::params::Regime;
use serde_json::Value;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::artifacts::{csv_tag, parse_csv_tag, Manifest, CLT_REPORT, COST_CURVE, L2_MONITOR, MANIFEST, RECORDS};
use crate::{CliResult, Failure};

pub const ERROR_VS_COST: &str = "error_vs_cost.svg";
pub const QQ: &str = "qq.csv";

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;
const MARGIN: f64 = 64.0;

fn domain(msg: impl Into<String>) -> Failure {
    Failure::Domain(msg.into())
}

fn json_tag(v: &Value) -> Option<(String, u64)> {
    Some((v.get("config_hash")?.as_str()?.to_owned(), v.get("master_seed")?.as_u64()?))
}

/// `(cost, error)` pairs from the cost curve; rows without an error are skipped.
fn error_points(csv: &str) -> CliResult<Vec<(f64, f64)>> {
    let mut lines = csv.lines().filter(|l| !l.starts_with('#'));
    let header: Vec<&str> = lines.next().ok_or_else(|| domain("cost curve is empty"))?.split(',').collect();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| *h == name)
            .ok_or_else(|| domain(format!("cost curve lacks column {name}")))
    };
    let (ci, ei) = (col("mean_cost")?, col("rms_error")?);
    let mut out = Vec::new();
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        let parse = |i: usize| f.get(i).and_then(|s| s.parse::<f64>().ok());
        if let (Some(c), Some(e)) = (parse(ci), parse(ei)) {
            if c > 0.0 && e > 0.0 {
                out.push((c, e));
            }
        }
    }
    Ok(out)
}

/// Least-squares `c` in `y ≈ c·log_M(x)/√x`.
pub fn fit_critical(points: &[(f64, f64)], scale: f64) -> f64 {
    let g = |x: f64| x.ln() / scale.ln() / x.sqrt();
    let num: f64 = points.iter().map(|&(x, y)| y * g(x)).sum();
    let den: f64 = points.iter().map(|&(x, _)| g(x) * g(x)).sum();
    num / den
}

/// Intercept `A` of `y ≈ A·x^{−r}` fitted in log space.
pub fn fit_slope_anchor(points: &[(f64, f64)], r: f64) -> f64 {
    let mean = points.iter().map(|&(x, y)| y.ln() + r * x.ln()).sum::<f64>() / points.len() as f64;
    mean.exp()
}

fn loglog_svg(points: &[(f64, f64)], guide: &[(f64, f64)], guide_label: &str, title: &str) -> String {
    let all = points.iter().chain(guide);
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in all {
        x0 = x0.min(x.log10());
        x1 = x1.max(x.log10());
        y0 = y0.min(y.log10());
        y1 = y1.max(y.log10());
    }
    let (x0, x1) = (x0.floor(), x1.ceil().max(x0.floor() + 1.0));
    let (y0, y1) = (y0.floor(), y1.ceil().max(y0.floor() + 1.0));
    let px = |x: f64| MARGIN + (x.log10() - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN);
    let py = |y: f64| HEIGHT - MARGIN - (y.log10() - y0) / (y1 - y0) * (HEIGHT - 2.0 * MARGIN);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{title}</text>"#, WIDTH / 2.0);
    let (left, right, top, bottom) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
    let _ = writeln!(
        s,
        r#"<rect x="{left}" y="{top}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        right - left,
        bottom - top
    );
    for e in (x0 as i32)..=(x1 as i32) {
        let x = px(10f64.powi(e));
        let _ = writeln!(s, r##"<line x1="{x:.2}" y1="{top}" x2="{x:.2}" y2="{bottom}" stroke="#ddd"/>"##);
        let _ = writeln!(s, r#"<text x="{x:.2}" y="{}" text-anchor="middle">1e{e}</text>"#, bottom + 16.0);
    }
    for e in (y0 as i32)..=(y1 as i32) {
        let y = py(10f64.powi(e));
        let _ = writeln!(s, r##"<line x1="{left}" y1="{y:.2}" x2="{right}" y2="{y:.2}" stroke="#ddd"/>"##);
        let _ = writeln!(s, r#"<text x="{}" y="{:.2}" text-anchor="end">1e{e}</text>"#, left - 6.0, y + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">mean cost</text>"#, WIDTH / 2.0, HEIGHT - 20.0);
    let _ = writeln!(
        s,
        r#"<text x="18" y="{}" text-anchor="middle" transform="rotate(-90 18 {})">rms error of averaged iterate</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0
    );
    if !guide.is_empty() {
        let path: Vec<String> = guide.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
        let _ = writeln!(
            s,
            r##"<polyline points="{}" fill="none" stroke="#c00" stroke-width="1.5" stroke-dasharray="6 4"/>"##,
            path.join(" ")
        );
        let _ = writeln!(s, r##"<text x="{}" y="{}" text-anchor="end" fill="#c00">{guide_label}</text>"##, right - 8.0, top + 16.0);
    }
    for &(x, y) in points {
        let _ = writeln!(s, r##"<circle cx="{:.2}" cy="{:.2}" r="3" fill="#036"/>"##, px(x), py(y));
    }
    s.push_str("</svg>\n");
    s
}

fn qq_csv(clt: &Value, tag: &str) -> Option<String> {
    let rows = clt.pointer("/clt/statistics/standardized")?.as_array()?;
    let samples: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| r.as_array().map(|a| a.iter().filter_map(Value::as_f64).collect()))
        .collect::<Option<_>>()?;
    let d = samples.first()?.len();
    let r = samples.len();
    let normal = Normal::standard();
    let mut out = format!("{tag}component,theoretical,sample\n");
    for j in 0..d {
        let mut xs: Vec<f64> = samples.iter().map(|s| s[j]).collect();
        xs.sort_by(f64::total_cmp);
        for (i, x) in xs.iter().enumerate() {
            let q = normal.inverse_cdf((i as f64 + 0.5) / r as f64);
            let _ = writeln!(out, "{j},{q:e},{x:e}");
        }
    }
    Some(out)
}

pub fn render(dir: &Path) -> CliResult<()> {
    let required = [MANIFEST, COST_CURVE, CLT_REPORT];
    let missing: Vec<&str> = required.iter().copied().filter(|f| !dir.join(f).is_file()).collect();
    if !missing.is_empty() {
        return Err(domain(format!("{}: missing {}", dir.display(), missing.join(", "))));
    }
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST))?)
        .map_err(|e| domain(format!("{MANIFEST}: {e}")))?;
    if !manifest.complete {
        return Err(domain(format!("{MANIFEST} marks the run incomplete")));
    }
    let expected = (manifest.config_hash.clone(), manifest.master_seed);

    let curve = fs::read_to_string(dir.join(COST_CURVE))?;
    let clt: Value =
        serde_json::from_str(&fs::read_to_string(dir.join(CLT_REPORT))?).map_err(|e| domain(format!("{CLT_REPORT}: {e}")))?;
    let mut tags = vec![(COST_CURVE, parse_csv_tag(&curve)), (CLT_REPORT, json_tag(&clt))];
    if let Ok(text) = fs::read_to_string(dir.join(RECORDS)) {
        tags.push((RECORDS, parse_csv_tag(&text)));
    }
    if let Ok(text) = fs::read_to_string(dir.join(L2_MONITOR)) {
        tags.push((L2_MONITOR, serde_json::from_str::<Value>(&text).ok().as_ref().and_then(json_tag)));
    }
    for (name, tag) in &tags {
        if tag.as_ref() != Some(&expected) {
            return Err(domain(format!("{name} does not carry config hash {} (mixed inputs)", expected.0)));
        }
    }

    let points = error_points(&curve)?;
    if points.is_empty() {
        return Err(domain("cost curve has no error column values (target unknown)"));
    }
    let (xmin, xmax) = points
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(a, b), &(x, _)| (a.min(x), b.max(x)));
    let grid: Vec<f64> = (0..=64).map(|i| xmin * (xmax / xmin).powf(i as f64 / 64.0)).collect();
    let (guide, label, title) = match (manifest.regime, manifest.rate) {
        (Regime::Slow, Some(r)) => {
            let a = fit_slope_anchor(&points, r);
            println!("guide slope -{r}");
            (
                grid.iter().map(|&x| (x, a * x.powf(-r))).collect::<Vec<_>>(),
                format!("slope −{r:.4}"),
                "slow regime: error vs cost",
            )
        }
        _ => {
            let c = fit_critical(&points, manifest.scale);
            println!("guide c {c:e}");
            let g = |x: f64| c * x.ln() / manifest.scale.ln() / x.sqrt();
            (
                grid.iter().map(|&x| (x, g(x))).filter(|p| p.1 > 0.0).collect(),
                format!("c·log_M(x)/√x, c = {c:.3e}"),
                "critical regime: error vs cost",
            )
        }
    };
    fs::write(dir.join(ERROR_VS_COST), loglog_svg(&points, &guide, &label, title))?;
    println!("wrote {ERROR_VS_COST}");
    match qq_csv(&clt, &csv_tag(&expected.0, expected.1)) {
        Some(q) => {
            fs::write(dir.join(QQ), q)?;
            println!("wrote {QQ}");
        }
        None => println!("qq skipped: no CLT samples"),
    }
    Ok(())
}
