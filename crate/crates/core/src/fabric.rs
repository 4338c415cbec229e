//! Arts, cultures and machines.
//!
//! An [`ArtDef`] is a capability unit that sits in one protocol layer and
//! declares the operation codes it understands. A [`CultureDef`] fills each
//! of the five layer slots with exactly one art. A [`MachineInstance`] is a
//! culture running on a node; the operations it accepts are derived from its
//! culture and nothing else.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{CommunityId, MachineCulture, MachineId, NodeId};

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layer {
    Physical,
    Mac,
    Routing,
    Transport,
    Application,
}

impl Layer {
    pub const ALL: [Layer; 5] = [
        Layer::Physical,
        Layer::Mac,
        Layer::Routing,
        Layer::Transport,
        Layer::Application,
    ];
}

impl fmt::Display for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Layer::Physical => "PHYSICAL",
            Layer::Mac => "MAC",
            Layer::Routing => "ROUTING",
            Layer::Transport => "TRANSPORT",
            Layer::Application => "APPLICATION",
        })
    }
}

/// Informational tag only; carries no behaviour.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NeedTag {
    Energy,
    Privacy,
    Security,
    None,
}

#[derive(Clone, PartialEq, Debug)]
pub struct ArtDef {
    pub name: String,
    pub layer: Layer,
    pub op_codes: BTreeSet<String>,
    pub params: BTreeMap<String, f64>,
    pub need_tag: Option<NeedTag>,
}

impl ArtDef {
    pub fn new(name: impl Into<String>, layer: Layer) -> Self {
        ArtDef {
            name: name.into(),
            layer,
            op_codes: BTreeSet::new(),
            params: BTreeMap::new(),
            need_tag: None,
        }
    }

    pub fn with_ops<I, S>(mut self, ops: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.op_codes.extend(ops.into_iter().map(Into::into));
        self
    }

    pub fn with_param(mut self, key: &str, value: f64) -> Self {
        self.params.insert(key.to_string(), value);
        self
    }

    pub fn param(&self, key: &str) -> Option<f64> {
        self.params.get(key).copied()
    }

    /// Built-in parameter presets for the named protocol stand-ins.
    ///
    /// These are simulator conventions; arts declared in a scenario may
    /// override any of the values.
    pub fn preset(name: &str) -> Option<ArtDef> {
        let art = match name {
            "FreeSpace" => ArtDef::new(name, Layer::Physical)
                .with_param("delay", 1.0)
                .with_param("loss", 0.0),
            "TwoRay" => ArtDef::new(name, Layer::Physical)
                .with_param("delay", 2.0)
                .with_param("loss", 0.01),
            "CSMA" => ArtDef::new(name, Layer::Mac).with_param("contention", 1.0),
            "802.11" => ArtDef::new(name, Layer::Mac).with_param("contention", 2.0),
            "MACA" | "TSMA" => ArtDef::new(name, Layer::Mac).with_param("contention", 1.0),
            "DSDV" | "Bellman-Ford" | "AODV" | "DSR" | "OSPF" | "FSR" | "WRP" | "LAR" => {
                ArtDef::new(name, Layer::Routing)
            }
            "TCP-abstract" | "TCP" => ArtDef::new(name, Layer::Transport)
                .with_param("window", 4.0)
                .with_param("retries", 8.0)
                .with_param("rto", 10.0)
                .with_param("chunk_size", 1024.0),
            "UDP" => ArtDef::new(name, Layer::Transport),
            "FTP" => ArtDef::new(name, Layer::Application).with_ops(["FILE_REQ", "FILE_CHUNK", "FILE_ACK"]),
            "Telnet" => ArtDef::new(name, Layer::Application).with_ops(["TELNET_LINE"]),
            "CBR" => ArtDef::new(name, Layer::Application).with_ops(["CBR_DATA"]),
            _ => return None,
        };
        Some(art)
    }
}

#[derive(Clone, PartialEq, Debug)]
pub struct CultureDef {
    pub name: String,
    pub slots: BTreeMap<Layer, String>,
    /// Node attributes required to start this service (e.g. `gateway`).
    pub requires: BTreeSet<String>,
}

impl CultureDef {
    pub fn new(name: impl Into<String>) -> Self {
        CultureDef {
            name: name.into(),
            slots: BTreeMap::new(),
            requires: BTreeSet::new(),
        }
    }

    pub fn slot(mut self, layer: Layer, art: impl Into<String>) -> Self {
        self.slots.insert(layer, art.into());
        self
    }

    pub fn requiring(mut self, attribute: impl Into<String>) -> Self {
        self.requires.insert(attribute.into());
        self
    }

    /// The stock file service: free space, CSMA, DSDV, abstract TCP and FTP.
    pub fn file_service(name: impl Into<String>) -> Self {
        CultureDef::new(name)
            .slot(Layer::Physical, "FreeSpace")
            .slot(Layer::Mac, "CSMA")
            .slot(Layer::Routing, "DSDV")
            .slot(Layer::Transport, "TCP-abstract")
            .slot(Layer::Application, "FTP")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FabricError {
    #[error("art {0:?} is already registered")]
    DuplicateArt(String),
    #[error("application art {0:?} declares no operation codes")]
    NoOps(String),
    #[error("culture {0:?} is already registered")]
    DuplicateCulture(String),
    #[error("culture {culture:?} leaves the {layer} slot empty")]
    MissingSlot { culture: String, layer: Layer },
    #[error("culture {culture:?} puts {layer:?} art {art:?} in the {slot} slot")]
    LayerMismatch {
        culture: String,
        slot: Layer,
        art: String,
        layer: Layer,
    },
    #[error("culture {culture:?} references unknown art {art:?}")]
    UnknownArt { culture: String, art: String },
    #[error("unknown culture {0:?}")]
    UnknownCulture(String),
    #[error("node {node} already has a {culture:?} machine waiting for a community")]
    DuplicatePending { node: NodeId, culture: String },
    #[error("machine {0} already belongs to a community")]
    AlreadyJoined(MachineId),
}

/// Arts and cultures known to a scenario. Built once, then read-only.
#[derive(Clone, Debug, Default)]
pub struct ArtRegistry {
    arts: BTreeMap<String, ArtDef>,
    cultures: BTreeMap<String, CultureDef>,
}

impl ArtRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register_art(&mut self, def: ArtDef) -> Result<(), FabricError> {
        if self.arts.contains_key(&def.name) {
            return Err(FabricError::DuplicateArt(def.name));
        }
        if def.layer == Layer::Application && def.op_codes.is_empty() {
            return Err(FabricError::NoOps(def.name));
        }
        self.arts.insert(def.name.clone(), def);
        Ok(())
    }

    pub fn register_culture(&mut self, def: CultureDef) -> Result<(), FabricError> {
        if self.cultures.contains_key(&def.name) {
            return Err(FabricError::DuplicateCulture(def.name));
        }
        for layer in Layer::ALL {
            let Some(art_name) = def.slots.get(&layer) else {
                return Err(FabricError::MissingSlot {
                    culture: def.name.clone(),
                    layer,
                });
            };
            let Some(art) = self.arts.get(art_name) else {
                return Err(FabricError::UnknownArt {
                    culture: def.name.clone(),
                    art: art_name.clone(),
                });
            };
            if art.layer != layer {
                return Err(FabricError::LayerMismatch {
                    culture: def.name.clone(),
                    slot: layer,
                    art: art_name.clone(),
                    layer: art.layer,
                });
            }
        }
        self.cultures.insert(def.name.clone(), def);
        Ok(())
    }

    pub fn art(&self, name: &str) -> Option<&ArtDef> {
        self.arts.get(name)
    }

    pub fn culture(&self, name: &str) -> Option<&CultureDef> {
        self.cultures.get(name)
    }

    pub fn arts(&self) -> impl Iterator<Item = &ArtDef> {
        self.arts.values()
    }

    pub fn cultures(&self) -> impl Iterator<Item = &CultureDef> {
        self.cultures.values()
    }

    /// The art filling `layer` in a registered culture.
    pub fn culture_art(&self, culture: &str, layer: Layer) -> Option<&ArtDef> {
        let c = self.cultures.get(culture)?;
        self.arts.get(c.slots.get(&layer)?)
    }

    /// Union of the op codes of every art in the culture.
    pub fn culture_ops(&self, culture: &str) -> Option<BTreeSet<String>> {
        let c = self.cultures.get(culture)?;
        let mut ops = BTreeSet::new();
        for art in c.slots.values() {
            ops.extend(self.arts[art].op_codes.iter().cloned());
        }
        Some(ops)
    }

    /// Every op code declared by any registered art.
    pub fn all_ops(&self) -> BTreeSet<String> {
        self.arts.values().flat_map(|a| a.op_codes.iter().cloned()).collect()
    }
}

/// A culture running on a node.
#[derive(Clone, PartialEq, Debug)]
pub struct MachineInstance {
    mid: MachineId,
    culture: MachineCulture,
    cid: Option<CommunityId>,
    accepted_ops: BTreeSet<String>,
    /// Per-service counters, touched only by accepted operations.
    pub state: BTreeMap<String, u64>,
}

impl MachineInstance {
    pub fn mid(&self) -> &MachineId {
        &self.mid
    }

    pub fn node(&self) -> &NodeId {
        &self.mid.node
    }

    pub fn culture(&self) -> &MachineCulture {
        &self.culture
    }

    pub fn cid(&self) -> Option<&CommunityId> {
        self.cid.as_ref()
    }

    pub fn accepted_ops(&self) -> &BTreeSet<String> {
        &self.accepted_ops
    }

    pub fn accepts(&self, op_code: &str) -> bool {
        self.accepted_ops.contains(op_code)
    }

    pub fn join(&mut self, cid: CommunityId) -> Result<(), FabricError> {
        if self.cid.is_some() {
            return Err(FabricError::AlreadyJoined(self.mid.clone()));
        }
        self.cid = Some(cid);
        Ok(())
    }
}

/// Pure capability check: true iff the machine's culture declares `op_code`.
pub fn accepts(machine: &MachineInstance, op_code: &str) -> bool {
    machine.accepts(op_code)
}

/// The machines hosted by one node.
#[derive(Clone, Debug)]
pub struct MachineHost {
    node: NodeId,
    machines: Vec<MachineInstance>,
}

impl MachineHost {
    pub fn new(node: NodeId) -> Self {
        MachineHost {
            node,
            machines: Vec::new(),
        }
    }

    pub fn node(&self) -> &NodeId {
        &self.node
    }

    /// Instantiates `culture_name`; ordinals are assigned sequentially per
    /// node.
    pub fn instantiate(&mut self, registry: &ArtRegistry, culture_name: &str) -> Result<&MachineInstance, FabricError> {
        let ops = registry
            .culture_ops(culture_name)
            .ok_or_else(|| FabricError::UnknownCulture(culture_name.to_string()))?;
        if self.pending(culture_name).is_some() {
            return Err(FabricError::DuplicatePending {
                node: self.node.clone(),
                culture: culture_name.to_string(),
            });
        }
        let ordinal = self.machines.len() as u32;
        self.machines.push(MachineInstance {
            mid: MachineId::new(self.node.clone(), ordinal),
            culture: MachineCulture::new(culture_name),
            cid: None,
            accepted_ops: ops,
            state: BTreeMap::new(),
        });
        Ok(self.machines.last().unwrap())
    }

    /// A machine of `culture` that has not joined any community yet.
    pub fn pending(&self, culture: &str) -> Option<&MachineInstance> {
        self.machines
            .iter()
            .find(|m| m.cid.is_none() && m.culture.name() == culture)
    }

    pub fn machine_for(&self, cid: &CommunityId) -> Option<&MachineInstance> {
        self.machines.iter().find(|m| m.cid.as_ref() == Some(cid))
    }

    pub fn get(&self, mid: &MachineId) -> Option<&MachineInstance> {
        self.machines.get(mid.ordinal as usize).filter(|m| &m.mid == mid)
    }

    pub fn get_mut(&mut self, mid: &MachineId) -> Option<&mut MachineInstance> {
        self.machines.get_mut(mid.ordinal as usize).filter(|m| &m.mid == mid)
    }

    pub fn machines(&self) -> &[MachineInstance] {
        &self.machines
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::nodes_from_labels;

    fn culture_f_registry() -> ArtRegistry {
        let mut r = ArtRegistry::new();
        for name in ["FreeSpace", "CSMA", "DSDV", "TCP-abstract", "FTP"] {
            r.register_art(ArtDef::preset(name).unwrap()).unwrap();
        }
        r
    }

    #[test]
    fn register_art_rejects_duplicates() {
        let mut r = ArtRegistry::new();
        let ftp = ArtDef::new("FTP", Layer::Application).with_ops(["FILE_REQ", "FILE_CHUNK", "FILE_ACK"]);
        r.register_art(ftp.clone()).unwrap();
        assert_eq!(r.register_art(ftp), Err(FabricError::DuplicateArt("FTP".into())));
        r.register_art(ArtDef::new("DSDV", Layer::Routing)).unwrap();
        assert_eq!(r.art("DSDV").unwrap().layer, Layer::Routing);
    }

    #[test]
    fn application_art_needs_ops() {
        let mut r = ArtRegistry::new();
        assert!(matches!(
            r.register_art(ArtDef::new("Empty", Layer::Application)),
            Err(FabricError::NoOps(_))
        ));
    }

    #[test]
    fn stock_file_service_registers() {
        let mut r = culture_f_registry();
        r.register_culture(CultureDef::file_service("CultureF")).unwrap();
        let ops = r.culture_ops("CultureF").unwrap();
        assert!(ops.contains("FILE_CHUNK"));
    }

    #[test]
    fn culture_slot_errors() {
        let mut r = culture_f_registry();
        let mut missing = CultureDef::file_service("NoTransport");
        missing.slots.remove(&Layer::Transport);
        assert_eq!(
            r.register_culture(missing),
            Err(FabricError::MissingSlot {
                culture: "NoTransport".into(),
                layer: Layer::Transport
            })
        );
        let wrong = CultureDef::file_service("Wrong").slot(Layer::Routing, "FTP");
        assert!(matches!(
            r.register_culture(wrong),
            Err(FabricError::LayerMismatch {
                slot: Layer::Routing,
                ..
            })
        ));
        let unknown = CultureDef::file_service("Unknown").slot(Layer::Mac, "Aloha");
        assert!(matches!(
            r.register_culture(unknown),
            Err(FabricError::UnknownArt { .. })
        ));
        r.register_culture(CultureDef::file_service("F")).unwrap();
        assert!(matches!(
            r.register_culture(CultureDef::file_service("F")),
            Err(FabricError::DuplicateCulture(_))
        ));
    }

    /// Every (slot, art) pairing over a small registry: accepted exactly
    /// when the art's layer equals the slot.
    #[test]
    fn layer_mismatch_exhaustive() {
        let base = culture_f_registry();
        let arts: Vec<ArtDef> = base.arts().cloned().collect();
        for slot in Layer::ALL {
            for art in &arts {
                let mut r = base.clone();
                let c = CultureDef::file_service("T").slot(slot, art.name.clone());
                let res = r.register_culture(c);
                if art.layer == slot {
                    assert!(res.is_ok(), "{slot} <- {}", art.name);
                } else {
                    assert!(
                        matches!(res, Err(FabricError::LayerMismatch { .. })),
                        "{slot} <- {}",
                        art.name
                    );
                }
            }
        }
    }

    #[test]
    fn instantiate_and_accept() {
        let mut r = culture_f_registry();
        r.register_art(ArtDef::preset("Telnet").unwrap()).unwrap();
        r.register_culture(CultureDef::file_service("CultureF")).unwrap();
        r.register_culture(CultureDef::file_service("Remote").slot(Layer::Application, "Telnet"))
            .unwrap();
        let n = nodes_from_labels(&["N1"]);
        let mut host = MachineHost::new(n[0].clone());

        let m = host.instantiate(&r, "CultureF").unwrap().clone();
        assert_eq!(m.mid().ordinal, 0);
        assert_eq!(m.culture().name(), "CultureF");
        for op in ["FILE_REQ", "FILE_CHUNK", "FILE_ACK"] {
            assert!(accepts(&m, op));
        }
        assert!(!accepts(&m, "DNS_QUERY"));
        // pure: same answer every time
        assert_eq!(accepts(&m, "FILE_CHUNK"), accepts(&m, "FILE_CHUNK"));

        let second = host.instantiate(&r, "Remote").unwrap();
        assert_eq!(second.mid().ordinal, 1);

        assert!(matches!(
            host.instantiate(&r, "CultureF"),
            Err(FabricError::DuplicatePending { .. })
        ));
        assert_eq!(
            host.instantiate(&r, "NoSuch").unwrap_err(),
            FabricError::UnknownCulture("NoSuch".into())
        );
    }

    #[test]
    fn accepted_ops_match_culture_union() {
        let mut r = culture_f_registry();
        r.register_art(ArtDef::new("Chatty", Layer::Routing).with_ops(["HELLO_X"]))
            .unwrap();
        r.register_culture(CultureDef::file_service("F2").slot(Layer::Routing, "Chatty"))
            .unwrap();
        let n = nodes_from_labels(&["N1"]);
        let mut host = MachineHost::new(n[0].clone());
        let m = host.instantiate(&r, "F2").unwrap();
        let c = r.culture("F2").unwrap();
        let recomputed: BTreeSet<String> = c
            .slots
            .values()
            .flat_map(|a| r.art(a).unwrap().op_codes.iter().cloned())
            .collect();
        assert_eq!(m.accepted_ops(), &recomputed);
        assert!(m.accepts("HELLO_X"));
    }

    #[test]
    fn cid_is_set_once() {
        let mut r = culture_f_registry();
        r.register_culture(CultureDef::file_service("F")).unwrap();
        let n = nodes_from_labels(&["N1"]);
        let mut host = MachineHost::new(n[0].clone());
        let mid = host.instantiate(&r, "F").unwrap().mid().clone();
        let m = host.get_mut(&mid).unwrap();
        m.join(CommunityId::minted(1)).unwrap();
        assert!(m.join(CommunityId::minted(2)).is_err());
        assert!(host.machine_for(&CommunityId::minted(1)).is_some());
        // joined machines no longer block a new pending one
        assert!(host.instantiate(&r, "F").is_ok());
    }
}
