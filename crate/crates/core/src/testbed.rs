//! Deterministic harness joining a [`Controller`] and a [`SimSwitch`] under a
//! virtual clock. Time jumps from one scheduled event to the next, so runs
//! spanning hours of virtual time finish in milliseconds.

use std::time::Duration;

use thiserror::Error;

use crate::controller::{Controller, ControllerConfig};
use crate::netsim::{SimError, SimSwitch, SimTopology};
use crate::ofwire::HEADER_LEN;
use crate::probeengine::{EngineError, PingRequest, Task, Termination, TracerouteRequest};
use crate::session::SessionId;
use crate::time::{Timestamp, VirtualClock};

#[derive(Debug, Error)]
pub enum TestbedError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("switch session did not become active: {0}")]
    Handshake(String),
}

pub struct Testbed {
    clock: VirtualClock,
    now: Timestamp,
    controller: Controller,
    switch: SimSwitch,
    session: SessionId,
    coalesce_writes: bool,
}

impl Testbed {
    /// Builds the pair and runs the handshake. The seed comes from
    /// [`SimTopology::resolve_seed`].
    pub fn new(topo: SimTopology, config: ControllerConfig) -> Result<Self, TestbedError> {
        let seed = topo.resolve_seed()?;
        Self::with_seed(topo, config, seed)
    }

    pub fn with_seed(topo: SimTopology, config: ControllerConfig, seed: u64) -> Result<Self, TestbedError> {
        let mut controller = Controller::new(config);
        let mut switch = SimSwitch::new(topo, seed)?;
        let session = controller.open_session(Timestamp::ZERO);
        switch.connect(Timestamp::ZERO);
        let mut tb = Testbed {
            clock: VirtualClock::new(),
            now: Timestamp::ZERO,
            controller,
            switch,
            session,
            coalesce_writes: false,
        };
        while !tb.controller.session(session).is_some_and(|s| s.is_active()) {
            if tb.controller.session(session).is_none() || !tb.step() {
                return Err(TestbedError::Handshake("handshake did not complete".into()));
            }
        }
        // settle the reply flows before any traffic
        while tb.switch.next_event_time().is_some_and(|t| t <= tb.now + Duration::from_secs(1)) && tb.step() {}
        Ok(tb)
    }

    pub fn now(&self) -> Timestamp {
        self.now
    }

    pub fn clock(&self) -> &VirtualClock {
        &self.clock
    }

    pub fn controller(&self) -> &Controller {
        &self.controller
    }

    pub fn controller_mut(&mut self) -> &mut Controller {
        &mut self.controller
    }

    pub fn switch(&self) -> &SimSwitch {
        &self.switch
    }

    pub fn switch_mut(&mut self) -> &mut SimSwitch {
        &mut self.switch
    }

    pub fn session(&self) -> SessionId {
        self.session
    }

    /// Deliver everything the controller writes in one flush as a single
    /// segment, instead of one segment per message.
    pub fn set_coalesce_writes(&mut self, on: bool) {
        self.coalesce_writes = on;
    }

    fn flush(&mut self) {
        let bytes = self.controller.take_outgoing(self.session);
        if bytes.is_empty() {
            return;
        }
        if self.coalesce_writes {
            self.switch.from_controller(bytes, self.now);
            return;
        }
        let mut rest = &bytes[..];
        while rest.len() >= HEADER_LEN {
            let len = (u16::from_be_bytes([rest[2], rest[3]]) as usize).clamp(HEADER_LEN, rest.len());
            self.switch.from_controller(rest[..len].to_vec(), self.now);
            rest = &rest[len..];
        }
    }

    fn next_time(&self) -> Option<Timestamp> {
        match (self.switch.next_event_time(), self.controller.next_deadline()) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        }
    }

    /// Runs the next batch of simultaneous events. Returns false when
    /// nothing is scheduled.
    pub fn step(&mut self) -> bool {
        self.flush();
        let Some(next) = self.next_time() else {
            return false;
        };
        self.now = self.now.max(next);
        self.clock.advance_to(self.now);
        self.switch.advance(self.now);
        for (at, bytes) in self.switch.take_to_controller(self.now) {
            if self.controller.on_bytes(self.session, &bytes, at).is_err() {
                break;
            }
        }
        self.controller.poll(self.now);
        self.flush();
        true
    }

    /// Runs every event up to `t`, then sets the clock to `t`.
    pub fn run_until(&mut self, t: Timestamp) {
        self.flush();
        while self.next_time().is_some_and(|n| n <= t) {
            self.step();
        }
        self.now = self.now.max(t);
        self.clock.advance_to(self.now);
    }

    pub fn run_for(&mut self, d: Duration) {
        self.run_until(self.now + d);
    }

    /// Runs until no events remain.
    pub fn run_until_idle(&mut self) {
        while self.step() {}
    }

    /// Runs until `done` holds or nothing is scheduled. Returns `done`'s final value.
    pub fn run_while_not(&mut self, mut done: impl FnMut(&Testbed) -> bool) -> bool {
        loop {
            if done(self) {
                return true;
            }
            if !self.step() {
                return done(self);
            }
        }
    }

    pub fn start_ping(&mut self, req: &PingRequest) -> Result<u16, EngineError> {
        let id = self.controller.start_ping(Some(self.session), req, self.now)?;
        self.flush();
        Ok(id)
    }

    pub fn start_traceroute(&mut self, req: &TracerouteRequest) -> Result<u16, EngineError> {
        let id = self.controller.start_traceroute(Some(self.session), req, self.now)?;
        self.flush();
        Ok(id)
    }

    pub fn start_router_id_query(&mut self, target: std::net::Ipv4Addr, out_port: u32) -> Result<u16, EngineError> {
        let id = self.controller.start_router_id_query(Some(self.session), target, out_port, self.now)?;
        self.flush();
        Ok(id)
    }

    /// Whether task `icmp_id` has nothing left to wait for.
    pub fn task_done(&self, icmp_id: u16) -> bool {
        match self.controller.engine().task(icmp_id) {
            Some(Task::Ping(t)) => t.is_complete(),
            Some(Task::Traceroute(t)) => {
                t.terminated == Termination::MaxTtl
                    || (t.terminated == Termination::DestinationReached
                        && t.hop_records().values().flatten().all(|r| r.is_resolved()))
            }
            Some(Task::RouterId(t)) => t.record.is_resolved(),
            None => true,
        }
    }

    /// Runs until task `icmp_id` is done.
    pub fn run_task(&mut self, icmp_id: u16) -> bool {
        self.run_while_not(|tb| tb.task_done(icmp_id))
    }
}
