use std::fmt;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// What a class contributes to segmentation: the single background class, or
/// membership in a named foreground group (one output channel per group).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Role {
    Background,
    Foreground(String),
}

impl TryFrom<String> for Role {
    type Error = String;

    fn try_from(s: String) -> std::result::Result<Self, String> {
        if s == "background" {
            return Ok(Role::Background);
        }
        match s.strip_prefix("foreground-") {
            Some(group) if !group.is_empty() => Ok(Role::Foreground(group.to_string())),
            _ => Err(format!(
                "role must be `background` or `foreground-<group>`, got {s:?}"
            )),
        }
    }
}

impl From<Role> for String {
    fn from(r: Role) -> String {
        r.to_string()
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Role::Background => f.write_str("background"),
            Role::Foreground(g) => write!(f, "foreground-{g}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassEntry {
    pub id: u8,
    pub name: String,
    pub role: Role,
    /// Palette color used when the label map is written as PNG.
    #[serde(default)]
    pub color: [u8; 3],
}

/// Ordered list of label classes and the foreground groups they feed.
///
/// Ids are contiguous from zero and exactly one class is background. Output
/// channels follow the order in which foreground groups first appear.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ClassCatalog {
    entries: Vec<ClassEntry>,
    #[serde(skip)]
    groups: Vec<String>,
    #[serde(skip)]
    background: u8,
}

impl<'de> Deserialize<'de> for ClassCatalog {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Raw {
            entries: Vec<ClassEntry>,
        }
        let raw = Raw::deserialize(d)?;
        ClassCatalog::new(raw.entries).map_err(serde::de::Error::custom)
    }
}

impl Default for ClassCatalog {
    fn default() -> Self {
        let entry = |id, name: &str, role: Role, color| ClassEntry {
            id,
            name: name.to_string(),
            role,
            color,
        };
        ClassCatalog::new(vec![
            entry(0, "background", Role::Background, [0, 0, 0]),
            entry(1, "road", Role::Foreground("road".into()), [255, 215, 0]),
            entry(
                2,
                "sidewalk",
                Role::Foreground("pedestrian".into()),
                [30, 90, 255],
            ),
            entry(
                3,
                "crosswalk",
                Role::Foreground("pedestrian".into()),
                [120, 170, 255],
            ),
        ])
        .expect("default catalog is valid")
    }
}

impl ClassCatalog {
    pub fn new(entries: Vec<ClassEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Catalog("no classes".into()));
        }
        for (i, e) in entries.iter().enumerate() {
            if usize::from(e.id) != i {
                return Err(Error::Catalog(format!(
                    "ids must be contiguous from 0; entry {i} has id {}",
                    e.id
                )));
            }
        }
        let backgrounds: Vec<u8> = entries
            .iter()
            .filter(|e| e.role == Role::Background)
            .map(|e| e.id)
            .collect();
        if backgrounds.len() != 1 {
            return Err(Error::Catalog(format!(
                "exactly one background class required, found {}",
                backgrounds.len()
            )));
        }
        let mut groups: Vec<String> = Vec::new();
        for e in &entries {
            if let Role::Foreground(g) = &e.role {
                if !groups.contains(g) {
                    groups.push(g.clone());
                }
            }
        }
        Ok(Self {
            entries,
            groups,
            background: backgrounds[0],
        })
    }

    pub fn entries(&self) -> &[ClassEntry] {
        &self.entries
    }

    pub fn background_id(&self) -> u8 {
        self.background
    }

    /// Foreground group names in channel order.
    pub fn groups(&self) -> &[String] {
        &self.groups
    }

    pub fn num_channels(&self) -> usize {
        self.groups.len()
    }

    pub fn contains(&self, id: u8) -> bool {
        usize::from(id) < self.entries.len()
    }

    pub fn entry_by_name(&self, name: &str) -> Option<&ClassEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Channel index of a label id, or `None` for background.
    pub fn channel_of(&self, id: u8) -> Result<Option<usize>> {
        let entry = self
            .entries
            .get(usize::from(id))
            .ok_or(Error::UnknownLabel(id))?;
        Ok(match &entry.role {
            Role::Background => None,
            Role::Foreground(g) => self.groups.iter().position(|x| x == g),
        })
    }

    /// Lookup table from label id to channel (`None` = background).
    pub(crate) fn channel_table(&self) -> Vec<Option<usize>> {
        (0..self.entries.len())
            .map(|i| self.channel_of(i as u8).expect("id in range"))
            .collect()
    }

    /// Label ids that make up a foreground group.
    pub fn members(&self, group: &str) -> Vec<u8> {
        self.entries
            .iter()
            .filter(|e| matches!(&e.role, Role::Foreground(g) if g == group))
            .map(|e| e.id)
            .collect()
    }

    /// Representative label id written for a channel when decoding masks.
    pub fn primary_id(&self, channel: usize) -> u8 {
        self.members(&self.groups[channel])[0]
    }

    pub fn palette(&self) -> Vec<u8> {
        self.entries.iter().flat_map(|e| e.color).collect()
    }
}
