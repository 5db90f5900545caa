//! Terminal rendering of a generation history.
//!
//! Each decoded or prior token gets its own line, `token<TAB>iteration`,
//! coloured on a blue (early) to red (late) gradient. Prior slots show `-` and
//! stay uncoloured. Padding is left out. A final row lists every iteration
//! index in slot order.

use maskdiff_core::decode::{GenerationHistory, SlotOrigin};

const RESET: &str = "\x1b[0m";
const ROW_LABEL: &str = "iterations";

/// RGB for iteration `it` of `total`: pure blue at the first, pure red at the last.
pub fn iteration_color(it: usize, total: usize) -> (u8, u8, u8) {
    let f = if total <= 1 { 0.0 } else { (it - 1) as f64 / (total - 1) as f64 };
    let r = (255.0 * f).round() as u8;
    (r, 0, 255 - r)
}

fn label(origin: SlotOrigin) -> String {
    match origin {
        SlotOrigin::Iteration(i) => i.to_string(),
        SlotOrigin::Marker(_) => "-".to_string(),
    }
}

pub fn render_history(h: &GenerationHistory, color: bool) -> String {
    let total = h.summary.actual_iterations;
    let shown: Vec<_> = h.slots.iter().filter(|r| r.iteration != SlotOrigin::PAD).collect();
    let mut out = String::new();
    for r in &shown {
        let line = format!("{}\t{}", r.token_text, label(r.iteration));
        match r.iteration {
            SlotOrigin::Iteration(i) if color => {
                let (cr, cg, cb) = iteration_color(i, total);
                out.push_str(&format!("\x1b[38;2;{cr};{cg};{cb}m{line}{RESET}\n"));
            }
            _ => {
                out.push_str(&line);
                out.push('\n');
            }
        }
    }
    let row: Vec<String> = shown.iter().map(|r| label(r.iteration)).collect();
    out.push_str(&format!("{ROW_LABEL}\t{}\n", row.join(" ")));
    out
}

/// One rendered token: its text and iteration, `None` for a prior.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedToken {
    pub text: String,
    pub iteration: Option<usize>,
}

fn strip_ansi(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c == '\x1b' {
            for d in chars.by_ref() {
                if d == 'm' {
                    break;
                }
            }
        } else {
            out.push(c);
        }
    }
    out
}

/// Read a rendering back into tokens, checking the token lines against the
/// iteration row.
pub fn parse_rendered(text: &str) -> Result<Vec<RenderedToken>, String> {
    let lines: Vec<String> = text.lines().map(strip_ansi).collect();
    let (row, tokens) = lines.split_last().ok_or("empty rendering")?;
    let row = row.strip_prefix(ROW_LABEL).and_then(|r| r.strip_prefix('\t')).ok_or("missing iteration row")?;
    let labels: Vec<&str> = row.split_whitespace().collect();
    if labels.len() != tokens.len() {
        return Err(format!("{} token lines but {} iteration labels", tokens.len(), labels.len()));
    }
    tokens
        .iter()
        .zip(labels)
        .map(|(line, lab)| {
            let (text, it) = line.rsplit_once('\t').ok_or_else(|| format!("malformed line {line:?}"))?;
            if it != lab {
                return Err(format!("line {line:?} disagrees with row label {lab}"));
            }
            let iteration = match it {
                "-" => None,
                n => Some(n.parse().map_err(|_| format!("bad iteration {n:?}"))?),
            };
            Ok(RenderedToken { text: text.to_string(), iteration })
        })
        .collect()
}
