use std::collections::BTreeMap;

use crate::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EventKind {
    BeforeStep,
    AfterInference,
    AfterBackprop,
    AfterUpdate,
    EarlyStopQuery,
}

/// `Stop` orders above `Continue`, so `max` combines handler replies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Control {
    Continue,
    Stop,
}

/// Read-only view over the named tensors live at the time of an event.
pub struct Snapshot<'a> {
    layers: Vec<&'a BTreeMap<String, Tensor>>,
}

impl<'a> Snapshot<'a> {
    pub fn new(layers: Vec<&'a BTreeMap<String, Tensor>>) -> Self {
        Snapshot { layers }
    }

    pub fn empty() -> Snapshot<'static> {
        Snapshot { layers: Vec::new() }
    }

    /// Earlier layers shadow later ones.
    pub fn get(&self, name: &str) -> Option<&'a Tensor> {
        self.layers.iter().find_map(|l| l.get(name))
    }

    pub fn names(&self) -> Vec<&'a str> {
        let mut v: Vec<&str> = self.layers.iter().flat_map(|l| l.keys().map(String::as_str)).collect();
        v.sort_unstable();
        v.dedup();
        v
    }
}

type Handler<'h> = Box<dyn FnMut(EventKind, usize, &Snapshot<'_>) -> Control + 'h>;

/// Synchronous hooks run on the executing thread. They see tensors but
/// cannot reach the graph structure.
#[derive(Default)]
pub struct Events<'h> {
    handlers: Vec<Handler<'h>>,
    /// Step index passed to handlers.
    pub step: usize,
}

impl<'h> Events<'h> {
    pub fn new() -> Self {
        Events { handlers: Vec::new(), step: 0 }
    }

    pub fn on(&mut self, handler: impl FnMut(EventKind, usize, &Snapshot<'_>) -> Control + 'h) {
        self.handlers.push(Box::new(handler));
    }

    pub fn is_empty(&self) -> bool {
        self.handlers.is_empty()
    }

    /// Runs every handler; `Stop` wins if any handler asks for it.
    pub fn fire(&mut self, kind: EventKind, snapshot: &Snapshot<'_>) -> Control {
        let mut ctl = Control::Continue;
        for h in &mut self.handlers {
            if h(kind, self.step, snapshot) == Control::Stop {
                ctl = Control::Stop;
            }
        }
        ctl
    }
}
