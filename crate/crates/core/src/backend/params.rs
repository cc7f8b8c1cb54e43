use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A named parameter tensor. Its group is the name prefix before the first `.`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

pub fn group_of(name: &str) -> &str {
    name.split_once('.').map_or(name, |(g, _)| g)
}

/// All trainable tensors of a backend, keyed by dotted name.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.params.insert(name.into(), Param { shape, values });
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.get_mut(name)
    }

    pub fn values(&self, name: &str) -> &[f64] {
        &self.params[name].values
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    /// Group names in sorted order.
    pub fn groups(&self) -> Vec<String> {
        let mut groups: Vec<String> = self.params.keys().map(|n| group_of(n).to_string()).collect();
        groups.dedup();
        groups
    }

    /// Tensors of `group` in name order.
    pub fn group(&self, group: &str) -> Result<Vec<(&String, &Param)>> {
        let members: Vec<_> = self.params.iter().filter(|(n, _)| group_of(n) == group).collect();
        if members.is_empty() {
            return Err(Error::UnknownGroup(group.to_string()));
        }
        Ok(members)
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(|p| p.values.len()).sum()
    }
}
