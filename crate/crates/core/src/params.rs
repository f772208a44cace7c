//! Named, component-tagged parameter tensors.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{bitwise_eq, Float, Tensor};

/// Which part of the denoiser a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Component {
    SaQ,
    SaK,
    SaV,
    SaO,
    CaQ,
    CaK,
    CaV,
    CaO,
    Ffn,
    Norm,
    Embed,
    InputConv,
    OutputConv,
    Other,
}

/// Pooled component classes compared by the deviation analysis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ComponentClass {
    SA,
    CA,
    FFN,
}

impl ComponentClass {
    pub const ALL: [ComponentClass; 3] = [ComponentClass::SA, ComponentClass::CA, ComponentClass::FFN];

    pub fn as_str(self) -> &'static str {
        match self {
            ComponentClass::SA => "SA",
            ComponentClass::CA => "CA",
            ComponentClass::FFN => "FFN",
        }
    }
}

impl fmt::Display for ComponentClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ComponentClass {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ComponentClass::ALL
            .into_iter()
            .find(|c| c.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown component class `{s}` (SA, CA, FFN)")))
    }
}

impl Component {
    pub const ALL: [Component; 14] = [
        Component::SaQ,
        Component::SaK,
        Component::SaV,
        Component::SaO,
        Component::CaQ,
        Component::CaK,
        Component::CaV,
        Component::CaO,
        Component::Ffn,
        Component::Norm,
        Component::Embed,
        Component::InputConv,
        Component::OutputConv,
        Component::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Component::SaQ => "SA-Q",
            Component::SaK => "SA-K",
            Component::SaV => "SA-V",
            Component::SaO => "SA-O",
            Component::CaQ => "CA-Q",
            Component::CaK => "CA-K",
            Component::CaV => "CA-V",
            Component::CaO => "CA-O",
            Component::Ffn => "FFN",
            Component::Norm => "norm",
            Component::Embed => "embed",
            Component::InputConv => "input-conv",
            Component::OutputConv => "output-conv",
            Component::Other => "other",
        }
    }

    pub fn class(self) -> Option<ComponentClass> {
        match self {
            Component::SaQ | Component::SaK | Component::SaV | Component::SaO => Some(ComponentClass::SA),
            Component::CaQ | Component::CaK | Component::CaV | Component::CaO => Some(ComponentClass::CA),
            Component::Ffn => Some(ComponentClass::FFN),
            _ => None,
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Component {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Component::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::Checkpoint(format!("unknown component tag `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<F: Float> {
    pub tensor: Tensor<F>,
    pub component: Component,
    pub frozen: bool,
}

/// Parameters keyed by hierarchical name (`block3.ca.k.weight`).
#[derive(Clone, Debug, PartialEq)]
pub struct ParamTree<F: Float> {
    entries: BTreeMap<String, ParamEntry<F>>,
}

impl<F: Float> Default for ParamTree<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Block index encoded in a parameter name, e.g. `block3.sa.q.weight` -> 3.
pub fn layer_of(name: &str) -> Option<usize> {
    name.strip_prefix("block")?.split('.').next()?.parse().ok()
}

impl<F: Float> ParamTree<F> {
    pub fn new() -> Self {
        ParamTree { entries: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<F>, component: Component) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        self.entries.insert(name, ParamEntry { tensor, component, frozen: false });
        Ok(())
    }

    pub fn insert_entry(&mut self, name: impl Into<String>, entry: ParamEntry<F>) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        self.entries.insert(name, entry);
        Ok(())
    }

    pub fn remove(&mut self, name: &str) -> Option<ParamEntry<F>> {
        self.entries.remove(name)
    }

    pub fn get(&self, name: &str) -> Result<&ParamEntry<F>> {
        self.entries.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ParamEntry<F>> {
        self.entries.get_mut(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<F>> {
        Ok(&self.get(name)?.tensor)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry<F>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ParamEntry<F>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn num_params(&self) -> usize {
        self.entries.values().map(|e| e.tensor.numel()).sum()
    }

    pub fn num_trainable(&self) -> usize {
        self.entries.values().filter(|e| !e.frozen).map(|e| e.tensor.numel()).sum()
    }

    pub fn set_frozen(&mut self, pred: impl Fn(&str, &ParamEntry<F>) -> bool) {
        for (name, e) in self.entries.iter_mut() {
            e.frozen = pred(name, e);
        }
    }

    /// Same names with the same shapes.
    pub fn check_congruent(&self, other: &ParamTree<F>) -> Result<()> {
        for (name, e) in &self.entries {
            match other.entries.get(name) {
                None => return Err(Error::Incongruent(format!("`{name}` missing from second tree"))),
                Some(o) if o.tensor.shape() != e.tensor.shape() => {
                    return Err(Error::Incongruent(format!(
                        "`{name}` has shape {:?} vs {:?}",
                        e.tensor.shape(),
                        o.tensor.shape()
                    )))
                }
                _ => {}
            }
        }
        if let Some(extra) = other.entries.keys().find(|k| !self.entries.contains_key(*k)) {
            return Err(Error::Incongruent(format!("`{extra}` missing from first tree")));
        }
        Ok(())
    }

    pub fn is_congruent(&self, other: &ParamTree<F>) -> bool {
        self.check_congruent(other).is_ok()
    }

    pub fn zero_grad(&mut self) {
        self.entries.values_mut().for_each(|e| e.tensor.zero_grad());
    }

    pub fn accumulate_grads(&mut self, grads: &[(String, Vec<F>)]) -> Result<()> {
        for (name, g) in grads {
            self.get_mut(name)?.tensor.accumulate_grad(g)?;
        }
        Ok(())
    }

    pub fn cast<G: Float>(&self) -> ParamTree<G> {
        ParamTree {
            entries: self
                .entries
                .iter()
                .map(|(k, e)| {
                    (k.clone(), ParamEntry { tensor: e.tensor.cast(), component: e.component, frozen: e.frozen })
                })
                .collect(),
        }
    }

    /// Bitwise equality of values (gradients and flags ignored).
    pub fn values_equal(&self, other: &ParamTree<F>) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().all(|(k, e)| {
                other.entries.get(k).is_some_and(|o| {
                    o.tensor.shape() == e.tensor.shape() && bitwise_eq(o.tensor.data(), e.tensor.data())
                })
            })
    }
}

/// How parameters enter the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BindMode {
    /// Unfrozen parameters become trainable leaves.
    Train,
    /// Everything is a constant.
    Inference,
}

/// Lazily binds parameters of a tree onto a tape.
pub struct Bound<'t, 'p, F: Float> {
    tape: &'t Tape<F>,
    params: &'p ParamTree<F>,
    mode: BindMode,
    vars: RefCell<HashMap<String, Var<'t, F>>>,
}

impl<'t, 'p, F: Float> Bound<'t, 'p, F> {
    pub fn new(tape: &'t Tape<F>, params: &'p ParamTree<F>, mode: BindMode) -> Self {
        Bound { tape, params, mode, vars: RefCell::new(HashMap::new()) }
    }

    pub fn tape(&self) -> &'t Tape<F> {
        self.tape
    }

    pub fn params(&self) -> &'p ParamTree<F> {
        self.params
    }

    pub fn get(&self, name: &str) -> Result<Var<'t, F>> {
        if let Some(v) = self.vars.borrow().get(name) {
            return Ok(*v);
        }
        let entry = self.params.get(name)?;
        let var = match self.mode {
            BindMode::Train if !entry.frozen => self.tape.param(&entry.tensor)?,
            _ => self.tape.constant(&entry.tensor)?,
        };
        self.vars.borrow_mut().insert(name.to_string(), var);
        Ok(var)
    }

    /// Gradients for every bound trainable parameter, sorted by name.
    pub fn collect_grads(&self, grads: &Gradients<F>) -> Vec<(String, Vec<F>)> {
        let vars = self.vars.borrow();
        let mut out: Vec<(String, Vec<F>)> = vars
            .iter()
            .filter(|(name, _)| self.mode == BindMode::Train && self.params.get(name).is_ok_and(|e| !e.frozen))
            .map(|(name, v)| (name.clone(), grads.wrt(*v)))
            .collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tree() -> ParamTree<f64> {
        let mut t = ParamTree::new();
        t.insert("block0.sa.q.weight", Tensor::zeros(&[2, 2]), Component::SaQ).unwrap();
        t.insert("block1.ffn.w1", Tensor::zeros(&[2, 3]), Component::Ffn).unwrap();
        t
    }

    #[test]
    fn names_are_unique() {
        let mut t = tree();
        assert!(t.insert("block1.ffn.w1", Tensor::zeros(&[1]), Component::Ffn).is_err());
    }

    #[test]
    fn congruence_checks_names_and_shapes() {
        let a = tree();
        let mut b = tree();
        assert!(a.is_congruent(&b));
        b.get_mut("block1.ffn.w1").unwrap().tensor = Tensor::zeros(&[3, 2]);
        let msg = a.check_congruent(&b).unwrap_err().to_string();
        assert!(msg.contains("block1.ffn.w1"), "{msg}");
        let mut c = tree();
        c.insert("extra", Tensor::zeros(&[1]), Component::Other).unwrap();
        assert!(!a.is_congruent(&c));
        assert!(!c.is_congruent(&a));
    }

    #[test]
    fn layer_index_from_name() {
        assert_eq!(layer_of("block12.ca.k.weight"), Some(12));
        assert_eq!(layer_of("input_conv.weight"), None);
    }

    #[test]
    fn component_tags_round_trip() {
        for c in Component::ALL {
            assert_eq!(c.as_str().parse::<Component>().unwrap(), c);
        }
    }

    #[test]
    fn frozen_entries_bind_as_constants() {
        let mut t = tree();
        t.set_frozen(|name, _| name.contains("sa"));
        let tape = Tape::new();
        let bound = Bound::new(&tape, &t, BindMode::Train);
        let q = bound.get("block0.sa.q.weight").unwrap();
        let w = bound.get("block1.ffn.w1").unwrap();
        let loss = q.sum().unwrap().add(&w.sum().unwrap()).unwrap();
        let grads = tape.backward(loss).unwrap();
        let collected = bound.collect_grads(&grads);
        assert_eq!(collected.len(), 1);
        assert_eq!(collected[0].0, "block1.ffn.w1");
    }
}
