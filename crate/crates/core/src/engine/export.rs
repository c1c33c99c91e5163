use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::Federation;
use crate::error::{Error, Result};
use crate::model::{canonical_json_pretty, BubbleDescriptor, BubbleState};

pub const EXPORT_FORMAT: &str = "bubblekit-federation";
const EXPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FederationExport {
    pub format: String,
    pub version: u32,
    pub bubbles: Vec<BubbleDescriptor>,
}

impl FederationExport {
    pub fn of(fed: &Federation) -> Self {
        FederationExport {
            format: EXPORT_FORMAT.to_string(),
            version: EXPORT_VERSION,
            bubbles: fed.descriptors().cloned().collect(),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let export: FederationExport =
            serde_json::from_str(text).map_err(|e| Error::Corrupt(format!("federation export: {e}")))?;
        if export.format != EXPORT_FORMAT || export.version != EXPORT_VERSION {
            return Err(Error::Corrupt(format!("unsupported export {} v{}", export.format, export.version)));
        }
        Ok(export)
    }
}

/// All descriptors, sorted by id, as pretty canonical JSON.
pub fn export_json(fed: &Federation) -> String {
    canonical_json_pretty(&FederationExport::of(fed))
}

/// Graphviz rendering. Structural edges are solid, historical dashed,
/// embeds dotted and labelled with their mount. Edges point from a bubble
/// to the bubble it draws from.
pub fn export_dot(fed: &Federation) -> String {
    let bubbles: Vec<&BubbleDescriptor> = fed.descriptors().collect();
    render_dot(&bubbles)
}

impl FederationExport {
    pub fn to_dot(&self) -> String {
        render_dot(&self.bubbles.iter().collect::<Vec<_>>())
    }
}

fn render_dot(bubbles: &[&BubbleDescriptor]) -> String {
    let mut out = String::from("digraph federation {\n  rankdir=BT;\n  node [shape=box];\n");
    for d in bubbles {
        let style = match d.state {
            BubbleState::Active => "solid",
            BubbleState::Frozen => "bold",
            BubbleState::Retracted | BubbleState::Destroyed => "dashed",
        };
        let _ = writeln!(out, "  \"{}\" [label=\"{}\\n{}\", style={style}];", d.id, escape(&d.name), d.state);
    }
    for d in bubbles {
        for p in &d.structural_parents {
            let _ = writeln!(out, "  \"{}\" -> \"{p}\" [style=solid];", d.id);
        }
        for h in &d.historical_origins {
            let _ = writeln!(out, "  \"{}\" -> \"{h}\" [style=dashed];", d.id);
        }
        for e in &d.embeds {
            let _ = writeln!(out, "  \"{}\" -> \"{}\" [style=dotted, label=\"{}\"];", d.id, e.guest, escape(&e.mount.to_string()));
        }
    }
    out.push_str("}\n");
    out
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;

    #[test]
    fn json_round_trips_and_dot_has_edge_styles() {
        let mut fed = Federation::in_memory("t");
        let a = fed.create("a \"quoted\"", BTreeMap::new()).unwrap();
        let c = fed.clone_bubble(a, "c").unwrap();
        let h = fed.create("h", BTreeMap::new()).unwrap();
        fed.embed(h, "lib".parse().unwrap(), c).unwrap();
        let json = export_json(&fed);
        let parsed = FederationExport::parse(&json).unwrap();
        assert_eq!(parsed.bubbles.len(), 3);
        assert_eq!(canonical_json_pretty(&parsed), json);
        let dot = export_dot(&fed);
        assert!(dot.contains(&format!("\"{c}\" -> \"{a}\" [style=solid]")));
        assert!(dot.contains(&format!("\"{c}\" -> \"{a}\" [style=dashed]")));
        assert!(dot.contains(&format!("\"{h}\" -> \"{c}\" [style=dotted, label=\"lib/\"]")));
        assert!(dot.contains("a \\\"quoted\\\"\\nactive"));
    }
}
