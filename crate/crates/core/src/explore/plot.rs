//! Standalone SVG scatter plots of sweep points: accuracy against a cost on
//! a log axis. Colour encodes bw_W, marker size bw_A, marker shape bw_B.

use std::fmt::Write;

use super::SweepPoint;

const W: f64 = 720.0;
const H: f64 = 480.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;

const PALETTE: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

fn colour(bw: u32) -> &'static str {
    match bw {
        2..=8 => PALETTE[(bw - 2) as usize],
        _ => PALETTE[7],
    }
}

fn radius(bw: u32) -> f64 {
    if bw >= 32 {
        7.0
    } else {
        2.0 + 0.6 * bw as f64
    }
}

fn marker(out: &mut String, bw_b: u32, x: f64, y: f64, r: f64, fill: &str) {
    let style = format!("fill=\"{fill}\" fill-opacity=\"0.75\" stroke=\"#222\" stroke-width=\"0.5\"");
    let _ = match bw_b % 4 {
        0 => writeln!(out, "<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"{r:.2}\" {style}/>"),
        1 => writeln!(
            out,
            "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" {style}/>",
            x - r,
            y - r,
            2.0 * r,
            2.0 * r
        ),
        2 => writeln!(
            out,
            "<polygon points=\"{x:.2},{:.2} {:.2},{:.2} {:.2},{:.2}\" {style}/>",
            y - r,
            x - r,
            y + r,
            x + r,
            y + r
        ),
        _ => writeln!(
            out,
            "<polygon points=\"{x:.2},{:.2} {:.2},{y:.2} {x:.2},{:.2} {:.2},{y:.2}\" {style}/>",
            y - r,
            x + r,
            y + r,
            x - r
        ),
    };
}

/// Renders `points` with `cost` on a log10 x axis. Points with zero cost
/// cannot be placed and are counted in a note. `front` points are ringed.
pub fn render_svg(points: &[SweepPoint], front: &[usize], cost: impl Fn(&SweepPoint) -> u64, title: &str, x_label: &str) -> String {
    let placed: Vec<(usize, f64)> = points
        .iter()
        .enumerate()
        .filter(|(_, p)| cost(p) > 0)
        .map(|(i, p)| (i, (cost(p) as f64).log10()))
        .collect();
    let omitted = points.len() - placed.len();
    let (mut x0, mut x1) = placed
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &(_, x)| (a.min(x), b.max(x)));
    if !x0.is_finite() {
        (x0, x1) = (0.0, 1.0);
    }
    let (x0, x1) = (x0.floor(), x1.ceil().max(x0.floor() + 1.0));
    let (y0, y1) = points.iter().fold((1.0f64, 0.0f64), |(a, b), p| (a.min(p.accuracy), b.max(p.accuracy)));
    let (y0, y1) = if y1 > y0 { (y0, y1) } else { (0.0, 1.0) };
    let pad = (y1 - y0) * 0.05;
    let (y0, y1) = ((y0 - pad).max(0.0), (y1 + pad).min(1.0));
    let pw = W - LEFT - RIGHT;
    let ph = H - TOP - BOTTOM;
    let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| TOP + (1.0 - (y - y0) / (y1 - y0).max(1e-12)) * ph;

    let mut s = String::new();
    let _ = writeln!(s, "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"12\">");
    let _ = writeln!(s, "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>");
    let _ = writeln!(s, "<text x=\"{:.1}\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">{}</text>", LEFT + pw / 2.0, escape(title));
    let _ = writeln!(s, "<rect x=\"{LEFT}\" y=\"{TOP}\" width=\"{pw}\" height=\"{ph}\" fill=\"none\" stroke=\"#444\"/>");
    for d in (x0 as i64)..=(x1 as i64) {
        let x = sx(d as f64);
        let _ = writeln!(s, "<line x1=\"{x:.1}\" y1=\"{TOP}\" x2=\"{x:.1}\" y2=\"{:.1}\" stroke=\"#ddd\"/>", TOP + ph);
        let _ = writeln!(s, "<text x=\"{x:.1}\" y=\"{:.1}\" text-anchor=\"middle\">1e{d}</text>", TOP + ph + 16.0);
    }
    for t in 0..=5 {
        let v = y0 + (y1 - y0) * t as f64 / 5.0;
        let y = sy(v);
        let _ = writeln!(s, "<line x1=\"{LEFT}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" stroke=\"#eee\"/>", LEFT + pw);
        let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{v:.3}</text>", LEFT - 6.0, y + 4.0);
    }
    let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>", LEFT + pw / 2.0, H - 12.0, escape(x_label));
    let _ = writeln!(s, "<text transform=\"translate(18,{:.1}) rotate(-90)\" text-anchor=\"middle\">accuracy</text>", TOP + ph / 2.0);
    for &(i, x) in &placed {
        let p = &points[i];
        marker(&mut s, p.bw_b, sx(x), sy(p.accuracy), radius(p.bw_a), colour(p.bw_w));
    }
    for &i in front {
        let p = &points[i];
        if cost(p) > 0 {
            let (x, y) = (sx((cost(p) as f64).log10()), sy(p.accuracy));
            let _ = writeln!(s, "<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"{:.2}\" fill=\"none\" stroke=\"black\" stroke-width=\"1.2\"/>", radius(p.bw_a) + 3.0);
        }
    }
    let lx = W - RIGHT + 15.0;
    let _ = writeln!(s, "<text x=\"{lx}\" y=\"{}\">colour: bw_W</text>", TOP + 10.0);
    for (k, bw) in [2u32, 3, 4, 5, 6, 7, 8, 32].iter().enumerate() {
        let y = TOP + 28.0 + 16.0 * k as f64;
        let _ = writeln!(s, "<circle cx=\"{}\" cy=\"{y}\" r=\"5\" fill=\"{}\"/>", lx + 5.0, colour(*bw));
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\">{bw}</text>", lx + 16.0, y + 4.0);
    }
    let _ = writeln!(s, "<text x=\"{lx}\" y=\"{}\">size: bw_A</text>", TOP + 170.0);
    let _ = writeln!(s, "<text x=\"{lx}\" y=\"{}\">shape: bw_B</text>", TOP + 186.0);
    if omitted > 0 {
        let _ = writeln!(s, "<text x=\"{lx}\" y=\"{}\">{omitted} zero-cost points</text>", TOP + 210.0);
        let _ = writeln!(s, "<text x=\"{lx}\" y=\"{}\">not shown</text>", TOP + 224.0);
    }
    s.push_str("</svg>\n");
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
