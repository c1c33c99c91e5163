use std::collections::{BTreeSet, HashMap};

use globset::{Glob, GlobBuilder, GlobMatcher};

use super::Federation;
use crate::error::{Error, Result, Violation};
use crate::model::{BubbleId, Constraint};

pub(crate) fn compile_glob(glob: &str) -> Result<GlobMatcher> {
    let glob: Glob = GlobBuilder::new(glob)
        .literal_separator(true)
        .build()
        .map_err(|e| Error::InvalidPath(format!("{glob}: {e}")))?;
    Ok(glob.compile_matcher())
}

impl Federation {
    /// Constraints in force for `id`, each paired with its declaring bubble:
    /// its own, plus everything its structural parents have in force except
    /// what bubbles in its `constraint_cut` declared themselves.
    pub fn effective_constraints(&self, id: BubbleId) -> Result<BTreeSet<(BubbleId, Constraint)>> {
        let mut memo = HashMap::new();
        self.effective_inner(id, &mut memo)
    }

    fn effective_inner(
        &self,
        id: BubbleId,
        memo: &mut HashMap<BubbleId, BTreeSet<(BubbleId, Constraint)>>,
    ) -> Result<BTreeSet<(BubbleId, Constraint)>> {
        if let Some(hit) = memo.get(&id) {
            return Ok(hit.clone());
        }
        let d = self.descriptor(id)?;
        let mut out: BTreeSet<_> = d.constraints.iter().map(|c| (id, c.clone())).collect();
        for parent in &d.structural_parents {
            for (declarer, c) in self.effective_inner(*parent, memo)? {
                if !d.constraint_cut.contains(&declarer) {
                    out.insert((declarer, c));
                }
            }
        }
        memo.insert(id, out.clone());
        Ok(out)
    }

    /// Evaluates the effective constraints of `id` over its resolved view.
    pub fn check_constraints(&self, id: BubbleId) -> Result<Vec<Violation>> {
        let d = self.descriptor(id)?;
        let view = self.resolve(id)?;
        let mut out = Vec::new();
        for (declared_by, constraint) in self.effective_constraints(id)? {
            let violation = |path, message: String| Violation {
                bubble: id,
                declared_by,
                constraint: constraint.clone(),
                path,
                message,
            };
            match &constraint {
                Constraint::ForbidProvenance { bubble } => {
                    for element in view.values().filter(|e| e.provider == *bubble) {
                        out.push(violation(Some(element.path.clone()), format!("element provided by {bubble}")));
                    }
                }
                Constraint::ForbidPath { glob } => {
                    let matcher = compile_glob(glob)?;
                    for path in view.keys().filter(|p| matcher.is_match(p.as_str())) {
                        out.push(violation(Some(path.clone()), format!("path matches {glob}")));
                    }
                }
                Constraint::RequireAttribute { key, value } => {
                    let actual = d.attributes.get(key);
                    if actual != Some(value) {
                        let found = actual.map_or_else(|| "missing".to_string(), |a| format!("{a:?}"));
                        out.push(violation(None, format!("attribute {key} is {found}, expected {value:?}")));
                    }
                }
            }
        }
        Ok(out)
    }

    pub(crate) fn ensure_constraints(&self, ids: &[BubbleId]) -> Result<()> {
        let mut all = Vec::new();
        for id in ids {
            all.extend(self.check_constraints(*id)?);
        }
        if all.is_empty() {
            Ok(())
        } else {
            Err(Error::ConstraintViolation(all))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn glob_semantics() {
        let m = compile_glob("test/**").unwrap();
        assert!(m.is_match("test/x"));
        assert!(m.is_match("test/a/b"));
        assert!(!m.is_match("src/test/x"));
        let one = compile_glob("src/*.rs").unwrap();
        assert!(one.is_match("src/a.rs"));
        assert!(!one.is_match("src/a/b.rs"));
    }
}
