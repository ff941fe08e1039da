use std::collections::VecDeque;

use super::{ComponentCore, EventClass, EventKey, Model, PortId, SyncError};
use crate::proto::{ChannelParams, SimTime, WireMessage};
use crate::trace::Tracer;

#[derive(Debug, thiserror::Error)]
pub enum MonolithError {
    #[error("component {component}: {source}")]
    Component { component: String, source: SyncError },
    #[error("port {port} of component {component} is not connected")]
    Unconnected { component: String, port: PortId },
    #[error("channel ends disagree on parameters")]
    ParamMismatch,
}

struct Slot<M> {
    name: String,
    core: ComponentCore<M>,
    /// Peer `(component, port)` per local port.
    links: Vec<Option<(usize, PortId)>>,
    inbox: Vec<VecDeque<WireMessage>>,
}

/// Runs a whole topology on one thread with one global event order.
///
/// Messages go straight into the receiver's per-port FIFO and are delivered
/// at their timestamp. Events run in `(time, component, key)` order; since
/// every link latency is positive, nothing one component does at `T` can
/// affect another component at `T`, so each component sees exactly the event
/// sequence the distributed kernel would give it.
pub struct Monolith<M> {
    comps: Vec<Slot<M>>,
}

impl<M: Model> Default for Monolith<M> {
    fn default() -> Self {
        Monolith { comps: Vec::new() }
    }
}

impl<M: Model> Monolith<M> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_component(&mut self, name: impl Into<String>, model: M, tracer: Tracer) -> usize {
        self.comps.push(Slot {
            name: name.into(),
            core: ComponentCore::new(model, tracer),
            links: Vec::new(),
            inbox: Vec::new(),
        });
        self.comps.len() - 1
    }

    pub fn add_port(&mut self, comp: usize, name: &str, params: ChannelParams) -> Result<PortId, MonolithError> {
        let slot = &mut self.comps[comp];
        let port = slot.core.add_port(name, params).map_err(|source| MonolithError::Component {
            component: slot.name.clone(),
            source,
        })?;
        slot.links.push(None);
        slot.inbox.push(VecDeque::new());
        Ok(port)
    }

    pub fn connect(&mut self, a: (usize, PortId), b: (usize, PortId)) -> Result<(), MonolithError> {
        if self.comps[a.0].core.params(a.1) != self.comps[b.0].core.params(b.1) {
            return Err(MonolithError::ParamMismatch);
        }
        self.comps[a.0].links[a.1] = Some(b);
        self.comps[b.0].links[b.1] = Some(a);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.comps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.comps.is_empty()
    }

    pub fn name(&self, comp: usize) -> &str {
        &self.comps[comp].name
    }

    pub fn core(&self, comp: usize) -> &ComponentCore<M> {
        &self.comps[comp].core
    }

    pub fn core_mut(&mut self, comp: usize) -> &mut ComponentCore<M> {
        &mut self.comps[comp].core
    }

    pub fn into_cores(self) -> Vec<(String, ComponentCore<M>)> {
        self.comps.into_iter().map(|s| (s.name, s.core)).collect()
    }

    fn fail(&self, comp: usize, source: SyncError) -> MonolithError {
        MonolithError::Component { component: self.comps[comp].name.clone(), source }
    }

    fn route(&mut self, comp: usize) -> Result<(), MonolithError> {
        let out: Vec<_> = self.comps[comp].core.drain_outbox().collect();
        for (port, msg) in out {
            let Some((peer, peer_port)) = self.comps[comp].links[port] else {
                return Err(MonolithError::Unconnected { component: self.comps[comp].name.clone(), port });
            };
            self.comps[peer].inbox[peer_port].push_back(msg);
        }
        Ok(())
    }

    fn next_key(&self, comp: usize) -> Option<EventKey> {
        let slot = &self.comps[comp];
        let inbound = slot.inbox.iter().enumerate().filter_map(|(port, q)| {
            q.front().map(|m| EventKey { time: m.timestamp, class: EventClass::Inbound, port, seq: 0 })
        });
        inbound.chain(slot.core.next_local()).min()
    }

    /// Runs every event strictly before `until`.
    pub fn run(&mut self, until: SimTime) -> Result<(), MonolithError> {
        for c in 0..self.comps.len() {
            for (port, link) in self.comps[c].links.iter().enumerate() {
                if link.is_none() {
                    return Err(MonolithError::Unconnected { component: self.comps[c].name.clone(), port });
                }
            }
        }
        for c in 0..self.comps.len() {
            self.comps[c].core.start().map_err(|e| self.fail(c, e))?;
            self.route(c)?;
        }
        loop {
            let next = (0..self.comps.len())
                .filter_map(|c| self.next_key(c).map(|k| (k.time, c, k)))
                .min();
            let Some((time, c, key)) = next else { break };
            if time >= until {
                break;
            }
            let res = match key.class {
                EventClass::Inbound => {
                    let msg = self.comps[c].inbox[key.port].pop_front().unwrap();
                    self.comps[c].core.deliver(key.port, msg, time)
                }
                _ => self.comps[c].core.run_local(key),
            };
            res.map_err(|e| self.fail(c, e))?;
            self.route(c)?;
        }
        for c in 0..self.comps.len() {
            self.comps[c].core.finish().map_err(|e| self.fail(c, e))?;
        }
        Ok(())
    }
}
