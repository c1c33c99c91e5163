use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use super::resolve::Slot;
use super::Federation;
use crate::error::Result;
use crate::model::{BubbleId, LogicalPath};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    Structural,
    Historical,
    Embed,
}

/// One edge of the ancestry walk and the paths of the examined bubble's
/// view that were resolved across it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AncestryEntry {
    pub from: BubbleId,
    pub to: BubbleId,
    pub relation: Relation,
    pub contributed: Vec<LogicalPath>,
}

/// A mounted path that more than one embed offers. The first embed in the
/// host's list wins.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbedCollision {
    pub path: LogicalPath,
    pub winner: BubbleId,
    pub shadowed: Vec<BubbleId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AncestryReport {
    pub target: BubbleId,
    pub local_paths: Vec<LogicalPath>,
    pub entries: Vec<AncestryEntry>,
    pub embed_collisions: Vec<EmbedCollision>,
}

impl AncestryReport {
    pub fn edges(&self, relation: Relation) -> Vec<(BubbleId, BubbleId)> {
        self.entries.iter().filter(|e| e.relation == relation).map(|e| (e.from, e.to)).collect()
    }
}

impl Federation {
    /// Breadth-first walk over every relationship reachable from `target`.
    pub fn examine(&self, target: BubbleId) -> Result<AncestryReport> {
        let view = self.full_view(target)?;
        let mut crossings: BTreeMap<(BubbleId, BubbleId), BTreeSet<LogicalPath>> = BTreeMap::new();
        for (path, slot) in &view {
            let via = match slot {
                Slot::Present(e) => &e.via,
                Slot::Hidden { via, .. } => via,
            };
            for pair in via.windows(2) {
                crossings.entry((pair[0], pair[1])).or_default().insert(path.clone());
            }
        }
        let contributed = |from: BubbleId, to: BubbleId| -> Vec<LogicalPath> {
            crossings.get(&(from, to)).map(|s| s.iter().cloned().collect()).unwrap_or_default()
        };

        let root = self.descriptor(target)?;
        let local_paths = root.local_bindings.keys().cloned().collect();
        let mut entries = Vec::new();
        let mut seen = BTreeSet::from([target]);
        let mut queue = VecDeque::from([target]);
        while let Some(id) = queue.pop_front() {
            let d = self.descriptor(id)?;
            let edges = d
                .structural_parents
                .iter()
                .map(|p| (*p, Relation::Structural))
                .chain(d.embeds.iter().map(|e| (e.guest, Relation::Embed)))
                .chain(d.historical_origins.iter().map(|h| (*h, Relation::Historical)));
            for (to, relation) in edges {
                let paths = if relation == Relation::Historical { Vec::new() } else { contributed(id, to) };
                entries.push(AncestryEntry { from: id, to, relation, contributed: paths });
                if seen.insert(to) {
                    queue.push_back(to);
                }
            }
        }
        Ok(AncestryReport { target, local_paths, entries, embed_collisions: self.embed_collisions(target)? })
    }

    fn embed_collisions(&self, host: BubbleId) -> Result<Vec<EmbedCollision>> {
        let mut offers: BTreeMap<LogicalPath, Vec<BubbleId>> = BTreeMap::new();
        for embed in &self.descriptor(host)?.embeds {
            for path in self.full_view(embed.guest)?.keys() {
                offers.entry(embed.mount.join(path)).or_default().push(embed.guest);
            }
        }
        Ok(offers
            .into_iter()
            .filter(|(_, guests)| guests.len() > 1)
            .map(|(path, mut guests)| {
                let winner = guests.remove(0);
                EmbedCollision { path, winner, shadowed: guests }
            })
            .collect())
    }
}
