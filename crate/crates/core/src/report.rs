//! Tables, line plots and segmentation overlays.

use image::{Rgb, RgbImage};

use crate::data::{Image, Mask};
use crate::eval::{ClassMetrics, MetricsRow};
use crate::experiments::SweepRow;
use crate::trainer::LossRow;
use crate::{Error, Result};

/// Long-format CSV: one line per method and class, `class = mean` for the
/// foreground average.
pub fn metrics_csv(rows: &[MetricsRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "method",
        "class",
        "cases",
        "dice_mean",
        "dice_sd",
        "recall_mean",
        "recall_sd",
        "precision_mean",
        "precision_sd",
        "assd_mean",
        "assd_sd",
        "assd_excluded",
        "test_set_hash",
    ])?;
    for row in rows {
        let classes = std::iter::once(("mean".to_string(), &row.mean))
            .chain(row.per_class.iter().enumerate().map(|(i, c)| ((i + 1).to_string(), c)));
        for (class, m) in classes {
            let (am, asd) = m.assd_mm.map_or((String::new(), String::new()), |a| (a.mean.to_string(), a.sd.to_string()));
            w.write_record([
                row.method.clone(),
                class,
                row.cases.to_string(),
                m.dice_pct.mean.to_string(),
                m.dice_pct.sd.to_string(),
                m.recall_pct.mean.to_string(),
                m.recall_pct.sd.to_string(),
                m.precision_pct.mean.to_string(),
                m.precision_pct.sd.to_string(),
                am,
                asd,
                m.assd_excluded.to_string(),
                row.test_set_hash.clone(),
            ])?;
        }
    }
    into_string(w)
}

pub fn sweep_csv(rows: &[SweepRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    into_string(w)
}

pub fn read_sweep_csv(text: &str) -> Result<Vec<SweepRow>> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

fn into_string(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Serde(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Serde(e.to_string()))
}

/// True when every row was evaluated on the same test set.
pub fn hashes_agree(rows: &[MetricsRow]) -> bool {
    rows.windows(2).all(|w| w[0].test_set_hash == w[1].test_set_hash)
}

fn assd_cell(m: &ClassMetrics) -> String {
    m.assd_mm.map_or_else(|| "n/a".to_string(), |a| a.to_string())
}

/// Aligned plain-text table: Dice, Recall, Precision and ASSD averaged over
/// foreground classes, then Dice and ASSD per class.
pub fn text_table(rows: &[MetricsRow]) -> String {
    let classes = rows.iter().map(|r| r.per_class.len()).max().unwrap_or(0);
    let mut header = vec![
        "Method".to_string(),
        "Dice (%)".into(),
        "Recall (%)".into(),
        "Precision (%)".into(),
        "ASSD (mm)".into(),
    ];
    for c in 1..=classes {
        header.push(format!("C{c} Dice (%)"));
        header.push(format!("C{c} ASSD (mm)"));
    }
    let mut cells = vec![header];
    for r in rows {
        let mut line = vec![
            r.method.clone(),
            r.mean.dice_pct.to_string(),
            r.mean.recall_pct.to_string(),
            r.mean.precision_pct.to_string(),
            assd_cell(&r.mean),
        ];
        for c in 0..classes {
            match r.per_class.get(c) {
                Some(m) => {
                    line.push(m.dice_pct.to_string());
                    line.push(assd_cell(m));
                }
                None => line.extend(["".to_string(), "".to_string()]),
            }
        }
        cells.push(line);
    }
    let widths: Vec<usize> = (0..cells[0].len())
        .map(|i| cells.iter().map(|l| l[i].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    if !hashes_agree(rows) {
        out.push_str("WARNING: rows were evaluated on different test sets; values are not comparable\n");
    }
    for (n, line) in cells.iter().enumerate() {
        let padded: Vec<String> = line
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect();
        out.push_str(padded.join("  ").trim_end());
        out.push('\n');
        if n == 0 {
            let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
            out.push_str(&rule.join("  "));
            out.push('\n');
        }
    }
    out
}

/// Line colours, in series order.
pub const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [214, 39, 40],
    [44, 160, 44],
    [255, 127, 14],
    [148, 103, 189],
    [23, 190, 207],
];

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

const MARGIN: u32 = 24;

fn draw_line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Line plot on white with axes and a light 5x5 grid. Series are drawn in
/// [`PALETTE`] order; non-finite points are skipped.
pub fn line_plot(series: &[Series], width: u32, height: u32) -> Result<RgbImage> {
    if width <= 2 * MARGIN || height <= 2 * MARGIN {
        return Err(Error::Parameter(format!("plot of {width}x{height} leaves no drawing area")));
    }
    let finite = series
        .iter()
        .flat_map(|s| s.points.iter())
        .filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in finite {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let (left, right, top, bottom) = (MARGIN as i64, (width - MARGIN) as i64, MARGIN as i64, (height - MARGIN) as i64);
    let grid = Rgb([225, 225, 225]);
    for i in 0..=4 {
        let gx = left + (right - left) * i / 4;
        let gy = top + (bottom - top) * i / 4;
        draw_line(&mut img, (gx, top), (gx, bottom), grid);
        draw_line(&mut img, (left, gy), (right, gy), grid);
    }
    let axis = Rgb([0, 0, 0]);
    draw_line(&mut img, (left, bottom), (right, bottom), axis);
    draw_line(&mut img, (left, top), (left, bottom), axis);
    if !x0.is_finite() {
        return Ok(img);
    }
    let span = |a: f64, b: f64| if b > a { b - a } else { 1.0 };
    let (sx, sy) = (span(x0, x1), span(y0, y1));
    let map = |(x, y): (f64, f64)| {
        let px = left as f64 + (x - x0) / sx * (right - left) as f64;
        let py = bottom as f64 - (y - y0) / sy * (bottom - top) as f64;
        (px.round() as i64, py.round() as i64)
    };
    for (i, s) in series.iter().enumerate() {
        let color = Rgb(PALETTE[i % PALETTE.len()]);
        let pts: Vec<_> = s.points.iter().copied().filter(|(x, y)| x.is_finite() && y.is_finite()).map(map).collect();
        for w in pts.windows(2) {
            draw_line(&mut img, w[0], w[1], color);
        }
        for &(px, py) in &pts {
            for (ox, oy) in [(0, 0), (1, 0), (-1, 0), (0, 1), (0, -1)] {
                draw_line(&mut img, (px + ox, py + oy), (px + ox, py + oy), color);
            }
        }
    }
    Ok(img)
}

/// Total, supervised, raw consistency and contrastive loss against iteration.
pub fn loss_series(rows: &[LossRow]) -> Vec<Series> {
    let pick = |label: &str, f: fn(&LossRow) -> f64| Series {
        label: label.to_string(),
        points: rows.iter().map(|r| (r.iter as f64, f(r))).collect(),
    };
    vec![
        pick("total", |r| r.total),
        pick("l_sup", |r| r.l_sup),
        pick("l_unsup", |r| r.l_unsup),
        pick("l_ct", |r| r.l_ct),
    ]
}

/// Mean Dice against annotation ratio per method, plus the upper bound as a
/// flat line across the swept range.
pub fn sweep_series(rows: &[SweepRow]) -> Vec<Series> {
    let mut out: Vec<Series> = Vec::new();
    for r in rows.iter().filter(|r| !r.upper_bound) {
        match out.iter_mut().find(|s| s.label == r.method) {
            Some(s) => s.points.push((r.ratio, r.dice_mean)),
            None => out.push(Series {
                label: r.method.clone(),
                points: vec![(r.ratio, r.dice_mean)],
            }),
        }
    }
    for s in &mut out {
        s.points.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    let ratios = rows.iter().filter(|r| !r.upper_bound).map(|r| r.ratio);
    let (lo, hi) = ratios.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), r| (a.min(r), b.max(r)));
    if let Some(ub) = rows.iter().find(|r| r.upper_bound) {
        let (lo, hi) = if lo.is_finite() { (lo, hi) } else { (ub.ratio, ub.ratio) };
        out.push(Series {
            label: "upper_bound".into(),
            points: vec![(lo, ub.dice_mean), (hi, ub.dice_mean)],
        });
    }
    out
}

pub fn save_png(path: &std::path::Path, img: &RgbImage) -> Result<()> {
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub const TP_COLOR: [u8; 3] = [0, 200, 0];
pub const FN_COLOR: [u8; 3] = [220, 0, 0];
pub const FP_COLOR: [u8; 3] = [255, 150, 0];
pub const BOUNDARY_COLOR: [u8; 3] = [255, 255, 255];

/// Input in grey with per-pixel outcome tints (true positive green, false
/// negative red, false positive orange) and the prediction boundary in white.
/// A foreground pixel predicted as another foreground class counts as both a
/// false negative and a false positive and is drawn red.
pub fn overlay(image: &Image, pred: &Mask, gt: &Mask) -> Result<RgbImage> {
    if image.dim() != pred.dim() || image.dim() != gt.dim() {
        return Err(Error::Shape(format!(
            "overlay inputs differ in size: image {:?}, prediction {:?}, reference {:?}",
            image.dim(),
            pred.dim(),
            gt.dim()
        )));
    }
    let (h, w) = image.dim();
    let blend = |grey: u8, c: [u8; 3]| Rgb(c.map(|v| ((grey as u16 + 2 * v as u16) / 3) as u8));
    let fg = pred.mapv(|v| v > 0);
    let edge = |i: usize, j: usize| {
        fg[[i, j]]
            && (i == 0 || j == 0 || i + 1 == h || j + 1 == w || !fg[[i - 1, j]] || !fg[[i + 1, j]] || !fg[[i, j - 1]] || !fg[[i, j + 1]])
    };
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (i, j) = (y as usize, x as usize);
        let grey = (image[[i, j]].clamp(0.0, 1.0) * 255.0).round() as u8;
        let (p, g) = (pred[[i, j]], gt[[i, j]]);
        if edge(i, j) {
            Rgb(BOUNDARY_COLOR)
        } else if g > 0 && p == g {
            blend(grey, TP_COLOR)
        } else if g > 0 {
            blend(grey, FN_COLOR)
        } else if p > 0 {
            blend(grey, FP_COLOR)
        } else {
            Rgb([grey; 3])
        }
    }))
}
