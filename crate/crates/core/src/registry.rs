//! Name-keyed factories for interchangeable strategies (environments,
//! learners, curricula). Each registry maps a name to a constructor taking a
//! strategy-specific argument and returning a trait object.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

pub type Factory<T, A> = Box<dyn Fn(&A) -> Result<Box<T>> + Send + Sync>;

pub struct Registry<T: ?Sized, A> {
    kind: &'static str,
    factories: BTreeMap<String, Factory<T, A>>,
}

impl<T: ?Sized, A> Registry<T, A> {
    pub fn new(kind: &'static str) -> Self {
        Self {
            kind,
            factories: BTreeMap::new(),
        }
    }

    /// Register `factory` under `name`, replacing any previous entry.
    pub fn register<F>(&mut self, name: &str, factory: F) -> &mut Self
    where
        F: Fn(&A) -> Result<Box<T>> + Send + Sync + 'static,
    {
        self.factories.insert(name.to_string(), Box::new(factory));
        self
    }

    pub fn contains(&self, name: &str) -> bool {
        self.factories.contains_key(name)
    }

    pub fn names(&self) -> Vec<&str> {
        self.factories.keys().map(String::as_str).collect()
    }

    pub fn create(&self, name: &str, arg: &A) -> Result<Box<T>> {
        match self.factories.get(name) {
            Some(f) => f(arg),
            None => Err(Error::UnknownStrategy {
                kind: self.kind,
                name: name.to_string(),
                available: self.names().join(", "),
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    trait Greeter {
        fn greet(&self) -> String;
    }

    struct Hello(String);

    impl Greeter for Hello {
        fn greet(&self) -> String {
            format!("hello {}", self.0)
        }
    }

    #[test]
    fn create_by_name() {
        let mut r: Registry<dyn Greeter, String> = Registry::new("greeter");
        r.register("hello", |who: &String| Ok(Box::new(Hello(who.clone())) as Box<dyn Greeter>));
        assert_eq!(r.create("hello", &"there".into()).unwrap().greet(), "hello there");
        let err = r.create("bye", &String::new()).err().unwrap().to_string();
        assert!(err.contains("unknown greeter `bye`") && err.contains("hello"), "{err}");
    }
}
