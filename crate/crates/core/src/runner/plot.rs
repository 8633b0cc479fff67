use std::fmt::Write;

use crate::metrics::RocPoint;

const W: f64 = 480.0;
const H: f64 = 360.0;
const PAD: f64 = 48.0;
/// Left edge of the log-scaled FAR axis.
const MIN_FAR: f64 = 1e-4;

fn x_of(far: f64) -> f64 {
    let lo = MIN_FAR.log10();
    let t = (far.max(MIN_FAR).log10() - lo) / -lo;
    PAD + t * (W - 2.0 * PAD)
}

fn y_of(tpr: f64) -> f64 {
    H - PAD - tpr.clamp(0.0, 1.0) * (H - 2.0 * PAD)
}

/// ROC curves as an SVG line chart: FAR on a log axis from 1e-4 to 1,
/// verification rate on a linear axis.
pub fn roc_svg(title: &str, curves: &[(String, Vec<RocPoint>)]) -> String {
    const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="13">{}</text>"#, W / 2.0, escape(title));
    for k in 0..=4 {
        let far = 10f64.powi(k - 4);
        let x = x_of(far);
        let _ = writeln!(
            s,
            r##"<line x1="{x:.1}" y1="{:.1}" x2="{x:.1}" y2="{:.1}" stroke="#ddd"/><text x="{x:.1}" y="{:.1}" text-anchor="middle">1e{}</text>"##,
            PAD,
            H - PAD,
            H - PAD + 14.0,
            k - 4
        );
    }
    for k in 0..=5 {
        let v = k as f64 / 5.0;
        let y = y_of(v);
        let _ = writeln!(
            s,
            r##"<line x1="{PAD}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{v:.1}</text>"##,
            W - PAD,
            PAD - 4.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">FAR</text><text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">VR</text>"#,
        W / 2.0,
        H - 10.0,
        H / 2.0,
        H / 2.0
    );
    for (i, (label, pts)) in curves.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let path: Vec<String> = pts
            .iter()
            .map(|p| format!("{:.2},{:.2}", x_of(p.far), y_of(p.tpr)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            path.join(" ")
        );
        let ly = PAD + 14.0 * i as f64 + 8.0;
        let _ = writeln!(
            s,
            r#"<line x1="{:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            W - PAD - 130.0,
            W - PAD - 110.0,
            W - PAD - 105.0,
            ly + 4.0,
            escape(label)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axes_map_into_the_plot_area() {
        assert!((x_of(1.0) - (W - PAD)).abs() < 1e-9);
        assert!((x_of(1e-4) - PAD).abs() < 1e-9);
        assert!((x_of(0.0) - PAD).abs() < 1e-9);
        assert!((y_of(0.0) - (H - PAD)).abs() < 1e-9);
        assert!((y_of(1.0) - PAD).abs() < 1e-9);
    }

    #[test]
    fn svg_contains_one_polyline_per_curve() {
        let pts = vec![
            RocPoint { threshold: f64::INFINITY, far: 0.0, tpr: 0.0 },
            RocPoint { threshold: 0.5, far: 0.1, tpr: 0.8 },
            RocPoint { threshold: -1.0, far: 1.0, tpr: 1.0 },
        ];
        let svg = roc_svg("a <b>", &[("x".into(), pts.clone()), ("y".into(), pts)]);
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("a &lt;b&gt;"));
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    }
}
