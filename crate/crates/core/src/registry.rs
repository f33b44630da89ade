//! Name-keyed registries for interchangeable strategies.
//!
//! Each family (taggers, tree cells, negative mining, gradient probes) is a
//! trait object behind a factory. Configs and CLI flags carry the name; the
//! registry turns it into an instance. `A` is whatever construction context
//! the family needs (a lexicon path for taggers, nothing for most others).

use std::collections::BTreeMap;

use crate::error::{Error, Result};

type Factory<T, A> = Box<dyn Fn(&A) -> Result<Box<T>> + Send + Sync>;

struct Entry<T: ?Sized, A> {
    description: &'static str,
    factory: Factory<T, A>,
}

pub struct Registry<T: ?Sized, A = ()> {
    kind: &'static str,
    entries: BTreeMap<&'static str, Entry<T, A>>,
}

impl<T: ?Sized, A> Registry<T, A> {
    pub fn new(kind: &'static str) -> Self {
        Self {
            kind,
            entries: BTreeMap::new(),
        }
    }

    /// Register a factory under `name`. A later registration with the same
    /// name replaces the earlier one.
    pub fn register<Fac>(&mut self, name: &'static str, description: &'static str, factory: Fac)
    where
        Fac: Fn(&A) -> Result<Box<T>> + Send + Sync + 'static,
    {
        self.entries.insert(
            name,
            Entry {
                description,
                factory: Box::new(factory),
            },
        );
    }

    pub fn create_with(&self, name: &str, args: &A) -> Result<Box<T>> {
        self.check(name)?;
        (self.entries[name].factory)(args)
    }

    /// Fail with the list of registered names when `name` is unknown.
    pub fn check(&self, name: &str) -> Result<()> {
        if self.entries.contains_key(name) {
            Ok(())
        } else {
            Err(Error::UnknownStrategy {
                kind: self.kind,
                name: name.to_string(),
                available: self.names().join(", "),
            })
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }

    pub fn describe(&self) -> Vec<(&'static str, &'static str)> {
        self.entries
            .iter()
            .map(|(name, e)| (*name, e.description))
            .collect()
    }
}

impl<T: ?Sized> Registry<T, ()> {
    pub fn create(&self, name: &str) -> Result<Box<T>> {
        self.create_with(name, &())
    }
}
