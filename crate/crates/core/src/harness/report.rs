//! Machine-readable run reports.
//!
//! A report is a list of JSON records, one per line on disk. Records keep
//! wall-clock measurements inside a `wall` object; everything outside it is
//! a pure function of the scenario seed, so two runs of the same scenario
//! must match after stripping `wall`. `deterministic_lines` produces that
//! stripped view for comparisons.

use std::io::Write;

use serde_json::Value;

#[derive(Debug, Default, Clone)]
pub struct Report {
    lines: Vec<Value>,
}

impl Report {
    pub fn new() -> Report {
        Report::default()
    }

    pub fn push(&mut self, record: Value) {
        debug_assert!(record.get("kind").is_some(), "records carry a kind tag");
        self.lines.push(record);
    }

    pub fn lines(&self) -> &[Value] {
        &self.lines
    }

    pub fn kind(&self, kind: &str) -> Vec<&Value> {
        self.lines.iter().filter(|l| l.get("kind").and_then(Value::as_str) == Some(kind)).collect()
    }

    /// The seed-determined view: identical across runs of one scenario.
    pub fn deterministic_lines(&self) -> Vec<Value> {
        self.lines
            .iter()
            .map(|line| {
                let mut line = line.clone();
                if let Value::Object(map) = &mut line {
                    map.remove("wall");
                }
                line
            })
            .collect()
    }

    pub fn write_jsonl(&self, mut out: impl Write) -> std::io::Result<()> {
        for line in &self.lines {
            serde_json::to_writer(&mut out, line)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("vec write cannot fail");
        String::from_utf8(buf).expect("json is utf8")
    }
}

/// Static bar chart, one bar per labeled value. Enough for throughput
/// comparisons without pulling in a plotting stack.
pub fn bar_chart_svg(title: &str, unit: &str, series: &[(String, f64)]) -> String {
    let width = 640.0;
    let height = 360.0;
    let margin = 50.0;
    let plot_w = width - 2.0 * margin;
    let plot_h = height - 2.0 * margin;
    let max = series.iter().map(|(_, v)| *v).fold(f64::EPSILON, f64::max);
    let n = series.len().max(1) as f64;
    let slot = plot_w / n;
    let bar_w = slot * 0.6;

    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\" font-family=\"monospace\" font-size=\"12\">\n"
    ));
    s.push_str(&format!(
        "<text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">{}</text>\n",
        width / 2.0,
        xml_escape(title)
    ));
    s.push_str(&format!(
        "<line x1=\"{margin}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"black\"/>\n",
        height - margin,
        width - margin
    ));
    for (i, (label, value)) in series.iter().enumerate() {
        let h = (value / max) * plot_h;
        let x = margin + i as f64 * slot + (slot - bar_w) / 2.0;
        let y = height - margin - h;
        s.push_str(&format!(
            "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{bar_w:.1}\" height=\"{h:.1}\" \
             fill=\"#4477aa\"/>\n"
        ));
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n",
            x + bar_w / 2.0,
            height - margin + 16.0,
            xml_escape(label)
        ));
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{:.0}</text>\n",
            x + bar_w / 2.0,
            y - 6.0,
            value
        ));
    }
    s.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
        width / 2.0,
        height - 8.0,
        xml_escape(unit)
    ));
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
