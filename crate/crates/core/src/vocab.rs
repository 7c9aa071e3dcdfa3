//! Action classes and their decomposition into entity and motion sub-concepts.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActionClass {
    pub name: String,
    pub entity: Option<usize>,
    pub motion: Option<usize>,
    pub text: Option<String>,
}

/// An entity or motion class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Concept {
    pub name: String,
    pub text: Option<String>,
}

impl Concept {
    /// Phrase describing this class in prompts; falls back to the name.
    pub fn description(&self) -> &str {
        self.text.as_deref().unwrap_or(&self.name)
    }

    pub fn prompt(&self) -> String {
        format!("a photo of {}", self.description())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Entity,
    Motion,
}

impl Family {
    pub const ALL: [Family; 2] = [Family::Entity, Family::Motion];

    pub fn tag(self) -> &'static str {
        match self {
            Family::Entity => "ent",
            Family::Motion => "mot",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActionVocabulary {
    actions: Vec<ActionClass>,
    entities: Vec<Concept>,
    motions: Vec<Concept>,
}

#[derive(Debug, Serialize, Deserialize)]
struct VocabFile {
    actions: Vec<ActionEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    entities: Option<Vec<ConceptEntry>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    motions: Option<Vec<ConceptEntry>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ActionEntry {
    name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    entity: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    motion: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ConceptEntry {
    name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text: Option<String>,
}

/// Builder-style description of one action used by [`ActionVocabulary::from_parts`].
#[derive(Debug, Clone)]
pub struct ActionSpec<'a> {
    pub name: &'a str,
    pub entity: Option<&'a str>,
    pub motion: Option<&'a str>,
}

impl ActionVocabulary {
    /// Builds a vocabulary from action entries. Entity and motion classes are indexed by
    /// first reference unless explicit lists are given, in which case list order wins
    /// and every listed class must be referenced by some action.
    fn build(
        entries: Vec<ActionEntry>,
        entity_list: Option<Vec<ConceptEntry>>,
        motion_list: Option<Vec<ConceptEntry>>,
    ) -> Result<Self> {
        let mut seen = HashSet::new();
        for a in &entries {
            if !seen.insert(a.name.as_str()) {
                return Err(Error::Schema(format!("duplicate action name {:?}", a.name)));
            }
            if a.entity.is_none() && a.motion.is_none() {
                return Err(Error::Schema(format!(
                    "action {:?} has neither an entity nor a motion",
                    a.name
                )));
            }
        }

        let resolve = |family: &str,
                       list: Option<Vec<ConceptEntry>>,
                       refs: Vec<Option<&String>>|
         -> Result<(Vec<Concept>, Vec<Option<usize>>)> {
            let mut concepts: Vec<Concept> = Vec::new();
            let mut index: HashMap<String, usize> = HashMap::new();
            let explicit = list.is_some();
            if let Some(list) = list {
                for c in list {
                    if index.contains_key(&c.name) {
                        return Err(Error::Schema(format!(
                            "duplicate {family} name {:?}",
                            c.name
                        )));
                    }
                    index.insert(c.name.clone(), concepts.len());
                    concepts.push(Concept {
                        name: c.name,
                        text: c.text,
                    });
                }
            }
            let mut used = vec![false; concepts.len()];
            let mut mapping = Vec::with_capacity(refs.len());
            for r in refs {
                let Some(name) = r else {
                    mapping.push(None);
                    continue;
                };
                let idx = match index.get(name) {
                    Some(&i) => i,
                    None if explicit => {
                        return Err(Error::Schema(format!(
                            "action references unknown {family} {name:?}"
                        )))
                    }
                    None => {
                        index.insert(name.clone(), concepts.len());
                        concepts.push(Concept {
                            name: name.clone(),
                            text: None,
                        });
                        used.push(false);
                        concepts.len() - 1
                    }
                };
                used[idx] = true;
                mapping.push(Some(idx));
            }
            if let Some(i) = used.iter().position(|u| !u) {
                return Err(Error::Schema(format!(
                    "{family} {:?} is not referenced by any action",
                    concepts[i].name
                )));
            }
            Ok((concepts, mapping))
        };

        let (entities, ent_map) = resolve(
            "entity",
            entity_list,
            entries.iter().map(|a| a.entity.as_ref()).collect(),
        )?;
        let (motions, mot_map) = resolve(
            "motion",
            motion_list,
            entries.iter().map(|a| a.motion.as_ref()).collect(),
        )?;
        let actions = entries
            .into_iter()
            .zip(ent_map.into_iter().zip(mot_map))
            .map(|(a, (entity, motion))| ActionClass {
                name: a.name,
                entity,
                motion,
                text: a.text,
            })
            .collect();
        Ok(ActionVocabulary {
            actions,
            entities,
            motions,
        })
    }

    pub fn from_parts(actions: &[ActionSpec<'_>]) -> Result<Self> {
        let entries = actions
            .iter()
            .map(|a| ActionEntry {
                name: a.name.to_string(),
                entity: a.entity.map(str::to_string),
                motion: a.motion.map(str::to_string),
                text: None,
            })
            .collect();
        Self::build(entries, None, None)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: VocabFile =
            serde_json::from_str(text).map_err(|e| Error::Schema(format!("vocabulary: {e}")))?;
        Self::build(file.actions, file.entities, file.motions)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// JSON with explicit entity and motion lists, so indices survive a reload.
    pub fn to_json(&self) -> String {
        let concept = |c: &Concept| ConceptEntry {
            name: c.name.clone(),
            text: c.text.clone(),
        };
        let file = VocabFile {
            actions: self
                .actions
                .iter()
                .map(|a| ActionEntry {
                    name: a.name.clone(),
                    entity: a.entity.map(|e| self.entities[e].name.clone()),
                    motion: a.motion.map(|m| self.motions[m].name.clone()),
                    text: a.text.clone(),
                })
                .collect(),
            entities: Some(self.entities.iter().map(concept).collect()),
            motions: Some(self.motions.iter().map(concept).collect()),
        };
        serde_json::to_string_pretty(&file).expect("vocabulary serializes")
    }

    pub fn actions(&self) -> &[ActionClass] {
        &self.actions
    }

    pub fn entities(&self) -> &[Concept] {
        &self.entities
    }

    pub fn motions(&self) -> &[Concept] {
        &self.motions
    }

    pub fn concepts(&self, family: Family) -> &[Concept] {
        match family {
            Family::Entity => &self.entities,
            Family::Motion => &self.motions,
        }
    }

    pub fn num_actions(&self) -> usize {
        self.actions.len()
    }

    pub fn num_classes(&self, family: Family) -> usize {
        self.concepts(family).len()
    }

    pub fn mapping(&self, action: usize, family: Family) -> Option<usize> {
        let a = &self.actions[action];
        match family {
            Family::Entity => a.entity,
            Family::Motion => a.motion,
        }
    }

    pub fn action_index(&self, name: &str) -> Option<usize> {
        self.actions.iter().position(|a| a.name == name)
    }

    pub fn set_concept_text(&mut self, family: Family, index: usize, text: String) {
        let list = match family {
            Family::Entity => &mut self.entities,
            Family::Motion => &mut self.motions,
        };
        list[index].text = Some(text);
    }
}
