//! Node classes, nodes, and capacity accounting for a heterogeneous cluster.

use std::collections::{BTreeSet, HashSet};
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Resources requested by a job or offered by a node.
///
/// CPU is kept internally as integral millicores so that allocate/release
/// pairs are exact inverses; it is exposed and serialized as fractional
/// cores. Accelerator labels are exclusive: a label in use by one job is not
/// available to another on the same node.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct ResourceVector {
    cpu_millis: u64,
    pub memory_mb: u64,
    pub disk_mb: u64,
    pub accelerators: BTreeSet<String>,
}

impl ResourceVector {
    /// Builds a vector; negative or non-finite CPU values are rejected.
    pub fn new(cpu_cores: f64, memory_mb: u64, disk_mb: u64) -> Result<Self> {
        Ok(Self {
            cpu_millis: cores_to_millis(cpu_cores)?,
            memory_mb,
            disk_mb,
            accelerators: BTreeSet::new(),
        })
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn with_accelerators<I, S>(mut self, labels: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.accelerators = labels.into_iter().map(Into::into).collect();
        self
    }

    pub fn cpu_cores(&self) -> f64 {
        self.cpu_millis as f64 / 1000.0
    }

    pub fn cpu_millis(&self) -> u64 {
        self.cpu_millis
    }

    /// Componentwise `self >= other`, with set inclusion for accelerators.
    pub fn covers(&self, other: &ResourceVector) -> bool {
        self.cpu_millis >= other.cpu_millis
            && self.memory_mb >= other.memory_mb
            && self.disk_mb >= other.disk_mb
            && other.accelerators.is_subset(&self.accelerators)
    }

    /// Componentwise difference; `None` if any component would go negative.
    pub fn checked_sub(&self, other: &ResourceVector) -> Option<ResourceVector> {
        if !self.covers(other) {
            return None;
        }
        Some(ResourceVector {
            cpu_millis: self.cpu_millis - other.cpu_millis,
            memory_mb: self.memory_mb - other.memory_mb,
            disk_mb: self.disk_mb - other.disk_mb,
            accelerators: self.accelerators.difference(&other.accelerators).cloned().collect(),
        })
    }

    /// Componentwise sum; `None` on overflow or if accelerator labels collide.
    pub fn checked_add(&self, other: &ResourceVector) -> Option<ResourceVector> {
        if !self.accelerators.is_disjoint(&other.accelerators) {
            return None;
        }
        Some(ResourceVector {
            cpu_millis: self.cpu_millis.checked_add(other.cpu_millis)?,
            memory_mb: self.memory_mb.checked_add(other.memory_mb)?,
            disk_mb: self.disk_mb.checked_add(other.disk_mb)?,
            accelerators: self.accelerators.union(&other.accelerators).cloned().collect(),
        })
    }

    /// Scales numeric components by `1 / divisor`, rounding down. Accelerators
    /// are kept only when the divisor is 1.
    pub fn divide(&self, divisor: u32) -> ResourceVector {
        let d = u64::from(divisor.max(1));
        ResourceVector {
            cpu_millis: self.cpu_millis / d,
            memory_mb: self.memory_mb / d,
            disk_mb: self.disk_mb / d,
            accelerators: if d == 1 { self.accelerators.clone() } else { BTreeSet::new() },
        }
    }
}

fn cores_to_millis(cores: f64) -> Result<u64> {
    if !cores.is_finite() || cores < 0.0 {
        return Err(Error::invalid(format!("cpu_cores must be a finite non-negative number, got {cores}")));
    }
    Ok((cores * 1000.0).round() as u64)
}

#[derive(Serialize, Deserialize)]
struct ResourceVectorRepr {
    #[serde(default)]
    cpu_cores: f64,
    #[serde(default)]
    memory_mb: u64,
    #[serde(default)]
    disk_mb: u64,
    #[serde(default)]
    accelerators: Vec<String>,
}

impl Serialize for ResourceVector {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        ResourceVectorRepr {
            cpu_cores: self.cpu_cores(),
            memory_mb: self.memory_mb,
            disk_mb: self.disk_mb,
            accelerators: self.accelerators.iter().cloned().collect(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for ResourceVector {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let repr = ResourceVectorRepr::deserialize(deserializer)?;
        let mut seen = HashSet::new();
        for label in &repr.accelerators {
            if !seen.insert(label) {
                return Err(serde::de::Error::custom(format!("duplicate accelerator label `{label}`")));
            }
        }
        let cpu_millis = cores_to_millis(repr.cpu_cores).map_err(serde::de::Error::custom)?;
        Ok(ResourceVector {
            cpu_millis,
            memory_mb: repr.memory_mb,
            disk_mb: repr.disk_mb,
            accelerators: repr.accelerators.into_iter().collect(),
        })
    }
}

impl fmt::Display for ResourceVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "cpu={} mem={}MiB disk={}MiB", self.cpu_cores(), self.memory_mb, self.disk_mb)?;
        if !self.accelerators.is_empty() {
            let labels: Vec<_> = self.accelerators.iter().map(String::as_str).collect();
            write!(f, " acc={{{}}}", labels.join(","))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeClass {
    pub name: String,
    pub capacity: ResourceVector,
    /// Position in the cost order; 1 is the cheapest.
    pub cost_rank: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: String,
    pub class_name: String,
    pub allocated: ResourceVector,
}

impl Node {
    pub fn new(id: impl Into<String>, class_name: impl Into<String>) -> Self {
        Self { id: id.into(), class_name: class_name.into(), allocated: ResourceVector::zero() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusterSpec {
    pub classes: Vec<NodeClass>,
    pub nodes: Vec<Node>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ClusterDoc {
    classes: Vec<ClassDoc>,
    #[serde(default)]
    nodes: Vec<NodeDoc>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ClassDoc {
    name: String,
    cost_rank: i64,
    capacity: CapacityDoc,
}

// Numbers are read signed so negative capacities produce a precise error.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CapacityDoc {
    #[serde(default)]
    cpu_cores: f64,
    #[serde(default)]
    memory_mb: i64,
    #[serde(default)]
    disk_mb: i64,
    #[serde(default)]
    accelerators: Vec<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeDoc {
    id: String,
    class: String,
}

/// Parses and validates a cluster spec document (YAML or JSON).
pub fn load_cluster_spec(text: &str) -> Result<ClusterSpec> {
    let doc: ClusterDoc = crate::parse_document(text)?;
    ClusterSpec::from_doc(doc)
}

impl ClusterSpec {
    fn from_doc(doc: ClusterDoc) -> Result<Self> {
        let mut classes = Vec::with_capacity(doc.classes.len());
        for c in doc.classes {
            let cap = c.capacity;
            if cap.cpu_cores < 0.0 || cap.memory_mb < 0 || cap.disk_mb < 0 {
                return Err(Error::NegativeCapacity(c.name));
            }
            if c.cost_rank < 1 || c.cost_rank > i64::from(u32::MAX) {
                return Err(Error::invalid(format!("class `{}`: cost_rank must be a positive integer", c.name)));
            }
            let mut seen = HashSet::new();
            for label in &cap.accelerators {
                if !seen.insert(label.clone()) {
                    return Err(Error::invalid(format!("class `{}`: duplicate accelerator `{label}`", c.name)));
                }
            }
            let capacity = ResourceVector::new(cap.cpu_cores, cap.memory_mb as u64, cap.disk_mb as u64)?
                .with_accelerators(cap.accelerators);
            classes.push(NodeClass { name: c.name, capacity, cost_rank: c.cost_rank as u32 });
        }
        let nodes = doc.nodes.into_iter().map(|n| Node::new(n.id, n.class)).collect();
        let spec = ClusterSpec { classes, nodes };
        spec.validate()?;
        Ok(spec)
    }

    /// Checks every structural invariant of the spec.
    pub fn validate(&self) -> Result<()> {
        let mut names = HashSet::new();
        let mut ranks = HashSet::new();
        for c in &self.classes {
            if !names.insert(c.name.as_str()) {
                return Err(Error::DuplicateId(format!("node class `{}`", c.name)));
            }
            if !ranks.insert(c.cost_rank) {
                return Err(Error::DuplicateCostRank(c.cost_rank));
            }
        }
        let mut ids = HashSet::new();
        for n in &self.nodes {
            if !ids.insert(n.id.as_str()) {
                return Err(Error::DuplicateId(format!("node `{}`", n.id)));
            }
            let class = self
                .class(&n.class_name)
                .ok_or_else(|| Error::UnknownClass(n.class_name.clone()))?;
            if !class.capacity.covers(&n.allocated) {
                return Err(Error::invalid(format!("node `{}` is allocated beyond its capacity", n.id)));
            }
        }
        Ok(())
    }

    pub fn class(&self, name: &str) -> Option<&NodeClass> {
        self.classes.iter().find(|c| c.name == name)
    }

    pub fn node(&self, id: &str) -> Option<&Node> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn node_mut(&mut self, id: &str) -> Option<&mut Node> {
        self.nodes.iter_mut().find(|n| n.id == id)
    }

    /// Classes sorted cheapest first.
    pub fn classes_by_cost(&self) -> Vec<&NodeClass> {
        let mut classes: Vec<_> = self.classes.iter().collect();
        classes.sort_by_key(|c| c.cost_rank);
        classes
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes_by_cost().into_iter().map(|c| c.name.clone()).collect()
    }

    pub fn node_count(&self, class_name: &str) -> usize {
        self.nodes.iter().filter(|n| n.class_name == class_name).count()
    }

    fn capacity_of(&self, node: &Node) -> Result<&ResourceVector> {
        self.class(&node.class_name)
            .map(|c| &c.capacity)
            .ok_or_else(|| Error::UnknownClass(node.class_name.clone()))
    }

    /// Whether `demand` fits into the free capacity of `node`.
    pub fn fits(&self, demand: &ResourceVector, node: &Node) -> bool {
        let Ok(capacity) = self.capacity_of(node) else {
            return false;
        };
        match capacity.checked_sub(&node.allocated) {
            Some(free) => free.covers(demand) && demand.accelerators.is_subset(&capacity.accelerators),
            None => false,
        }
    }

    /// Returns `node` with `demand` added to its allocation.
    pub fn allocate(&self, node: &Node, demand: &ResourceVector) -> Result<Node> {
        if !self.fits(demand, node) {
            return Err(Error::OverAllocation { node: node.id.clone(), demand: demand.to_string() });
        }
        let allocated = node
            .allocated
            .checked_add(demand)
            .ok_or_else(|| Error::OverAllocation { node: node.id.clone(), demand: demand.to_string() })?;
        Ok(Node { allocated, ..node.clone() })
    }

    /// Returns `node` with `demand` removed from its allocation.
    pub fn release(&self, node: &Node, demand: &ResourceVector) -> Result<Node> {
        let allocated = node
            .allocated
            .checked_sub(demand)
            .ok_or_else(|| Error::OverRelease { node: node.id.clone(), demand: demand.to_string() })?;
        Ok(Node { allocated, ..node.clone() })
    }

    /// Allocates in place on the node with the given id.
    pub fn allocate_on(&mut self, node_id: &str, demand: &ResourceVector) -> Result<()> {
        let node = self.node(node_id).ok_or_else(|| Error::NotFound(format!("node `{node_id}`")))?;
        let updated = self.allocate(node, demand)?;
        *self.node_mut(node_id).expect("node exists") = updated;
        Ok(())
    }

    /// Releases in place on the node with the given id.
    pub fn release_on(&mut self, node_id: &str, demand: &ResourceVector) -> Result<()> {
        let node = self.node(node_id).ok_or_else(|| Error::NotFound(format!("node `{node_id}`")))?;
        let updated = self.release(node, demand)?;
        *self.node_mut(node_id).expect("node exists") = updated;
        Ok(())
    }
}

impl<'de> Deserialize<'de> for ClusterSpec {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let doc = ClusterDoc::deserialize(deserializer)?;
        ClusterSpec::from_doc(doc).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const TWO_CLASS: &str = r#"
classes:
  - name: regular-memory
    cost_rank: 1
    capacity: {cpu_cores: 4, memory_mb: 4096, disk_mb: 100000}
  - name: large-memory
    cost_rank: 2
    capacity: {cpu_cores: 16, memory_mb: 32768, disk_mb: 500000, accelerators: [fpga]}
nodes:
  - {id: reg-1, class: regular-memory}
  - {id: reg-2, class: regular-memory}
  - {id: big-1, class: large-memory}
"#;

    fn spec() -> ClusterSpec {
        load_cluster_spec(TWO_CLASS).unwrap()
    }

    #[test]
    fn loads_two_class_cluster() {
        let spec = spec();
        assert_eq!(spec.classes.len(), 2);
        assert_eq!(spec.nodes.len(), 3);
        assert!(spec.nodes.iter().all(|n| n.allocated == ResourceVector::zero()));
        assert_eq!(spec.class_names(), vec!["regular-memory", "large-memory"]);
    }

    #[test]
    fn loads_json_too() {
        let json = r#"{"classes":[{"name":"a","cost_rank":1,"capacity":{"cpu_cores":1.5,"memory_mb":10,"disk_mb":0}}],"nodes":[]}"#;
        let spec = load_cluster_spec(json).unwrap();
        assert_eq!(spec.classes[0].capacity.cpu_millis(), 1500);
        assert!(spec.nodes.is_empty());
    }

    #[test]
    fn rejects_unknown_class() {
        let text = "classes: [{name: a, cost_rank: 1, capacity: {memory_mb: 1}}]\nnodes: [{id: n, class: gpu}]";
        assert!(matches!(load_cluster_spec(text), Err(Error::UnknownClass(c)) if c == "gpu"));
    }

    #[test]
    fn rejects_duplicates_and_negatives() {
        let dup_node = "classes: [{name: a, cost_rank: 1, capacity: {}}]\nnodes: [{id: n, class: a}, {id: n, class: a}]";
        assert!(matches!(load_cluster_spec(dup_node), Err(Error::DuplicateId(_))));
        let dup_rank = "classes: [{name: a, cost_rank: 1, capacity: {}}, {name: b, cost_rank: 1, capacity: {}}]";
        assert!(matches!(load_cluster_spec(dup_rank), Err(Error::DuplicateCostRank(1))));
        let dup_class = "classes: [{name: a, cost_rank: 1, capacity: {}}, {name: a, cost_rank: 2, capacity: {}}]";
        assert!(matches!(load_cluster_spec(dup_class), Err(Error::DuplicateId(_))));
        let neg = "classes: [{name: a, cost_rank: 1, capacity: {memory_mb: -5}}]";
        assert!(matches!(load_cluster_spec(neg), Err(Error::NegativeCapacity(_))));
        assert!(matches!(load_cluster_spec("classes: ["), Err(Error::Parse(_))));
    }

    #[test]
    fn fits_rules() {
        let spec = spec();
        let reg = spec.node("reg-1").unwrap();
        assert!(spec.fits(&ResourceVector::zero(), reg));
        assert!(!spec.fits(&ResourceVector::new(0.0, 8192, 0).unwrap(), reg));
        let fpga = ResourceVector::zero().with_accelerators(["fpga"]);
        assert!(!spec.fits(&fpga, reg));
        assert!(spec.fits(&fpga, spec.node("big-1").unwrap()));
    }

    #[test]
    fn accelerators_are_exclusive() {
        let mut spec = spec();
        let fpga = ResourceVector::zero().with_accelerators(["fpga"]);
        spec.allocate_on("big-1", &fpga).unwrap();
        assert!(!spec.fits(&fpga, spec.node("big-1").unwrap()));
        spec.release_on("big-1", &fpga).unwrap();
        assert!(spec.fits(&fpga, spec.node("big-1").unwrap()));
    }

    #[test]
    fn allocate_release_round_trip_and_errors() {
        let spec = spec();
        let start = spec.node("reg-1").unwrap().clone();
        let d = ResourceVector::new(2.5, 1000, 10).unwrap();
        let after = spec.allocate(&start, &d).unwrap();
        assert_eq!(spec.release(&after, &d).unwrap(), start);

        let two = ResourceVector::new(4.0, 0, 0).unwrap();
        let full = spec.allocate(&start, &two).unwrap();
        let one = ResourceVector::new(1.0, 0, 0).unwrap();
        assert!(matches!(spec.allocate(&full, &one), Err(Error::OverAllocation { .. })));
        assert!(matches!(spec.release(&start, &one), Err(Error::OverRelease { .. })));
    }

    #[test]
    fn resource_vector_serde_rejects_duplicate_labels() {
        let v: std::result::Result<ResourceVector, _> =
            serde_json::from_str(r#"{"cpu_cores":1,"accelerators":["a","a"]}"#);
        assert!(v.is_err());
        let v: ResourceVector = serde_json::from_str(r#"{"cpu_cores":0.25,"memory_mb":3}"#).unwrap();
        assert_eq!(serde_json::to_value(&v).unwrap()["cpu_cores"], 0.25);
    }

    fn arb_demand() -> impl Strategy<Value = ResourceVector> {
        (0u64..5000, 0u64..20_000, 0u64..1000, proptest::bool::ANY).prop_map(|(cpu, mem, disk, acc)| {
            let v = ResourceVector { cpu_millis: cpu, memory_mb: mem, disk_mb: disk, accelerators: BTreeSet::new() };
            if acc { v.with_accelerators(["fpga"]) } else { v }
        })
    }

    proptest! {
        #[test]
        fn random_allocation_sequences_never_exceed_capacity(
            ops in proptest::collection::vec((arb_demand(), 0usize..3, proptest::bool::ANY), 1..80)
        ) {
            let mut spec = spec();
            let mut held: Vec<(String, ResourceVector)> = Vec::new();
            for (demand, node_idx, release) in ops {
                if release && !held.is_empty() {
                    let (id, d) = held.remove(node_idx % held.len());
                    spec.release_on(&id, &d).unwrap();
                } else {
                    let id = spec.nodes[node_idx].id.clone();
                    let fits = spec.fits(&demand, spec.node(&id).unwrap());
                    let res = spec.allocate_on(&id, &demand);
                    prop_assert_eq!(fits, res.is_ok());
                    if res.is_ok() {
                        held.push((id, demand));
                    }
                }
                prop_assert!(spec.validate().is_ok());
            }
            for (id, d) in held {
                spec.release_on(&id, &d).unwrap();
            }
            prop_assert!(spec.nodes.iter().all(|n| n.allocated == ResourceVector::zero()));
        }
    }
}
