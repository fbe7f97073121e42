//! Discrete-event reference model of the worker tier: `c` identical servers,
//! one FCFS queue, given arrival and service times.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Timing {
    pub arrival: f64,
    pub start: f64,
    pub finish: f64,
}

impl Timing {
    pub fn response(&self) -> f64 {
        self.finish - self.arrival
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Kind {
    // departures first at equal times so a freed server is reusable at once
    Departure { server: usize },
    Arrival { job: usize },
}

#[derive(Debug, PartialEq)]
struct Event {
    time: f64,
    seq: u64,
    kind: Kind,
}

impl Eq for Event {}

impl Ord for Event {
    fn cmp(&self, other: &Self) -> Ordering {
        let rank = |k: &Kind| matches!(k, Kind::Arrival { .. }) as u8;
        other
            .time
            .total_cmp(&self.time)
            .then_with(|| rank(&other.kind).cmp(&rank(&self.kind)))
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Simulates the queue; `timings[i]` belongs to job `i`.
pub fn simulate(arrivals: &[f64], services: &[f64], servers: usize) -> Vec<Timing> {
    assert_eq!(arrivals.len(), services.len(), "one service time per arrival");
    assert!(servers >= 1, "need at least one server");
    let mut events = BinaryHeap::new();
    let mut seq = 0;
    for (job, &time) in arrivals.iter().enumerate() {
        events.push(Event { time, seq, kind: Kind::Arrival { job } });
        seq += 1;
    }
    let mut timings: Vec<Timing> =
        arrivals.iter().map(|&a| Timing { arrival: a, start: f64::NAN, finish: f64::NAN }).collect();
    let mut busy = vec![None; servers];
    let mut queue = VecDeque::new();
    while let Some(Event { time, kind, .. }) = events.pop() {
        match kind {
            Kind::Arrival { job } => queue.push_back(job),
            Kind::Departure { server } => busy[server] = None,
        }
        while let (Some(server), Some(&job)) = (busy.iter().position(Option::is_none), queue.front()) {
            queue.pop_front();
            busy[server] = Some(job);
            let finish = time + services[job];
            timings[job].start = time;
            timings[job].finish = finish;
            events.push(Event { time: finish, seq, kind: Kind::Departure { server } });
            seq += 1;
        }
    }
    timings
}

pub fn mean_response(timings: &[Timing]) -> f64 {
    timings.iter().map(Timing::response).sum::<f64>() / timings.len().max(1) as f64
}

/// Probability that an arrival waits in an M/M/c queue (Erlang C).
pub fn erlang_c(servers: usize, offered_load: f64) -> f64 {
    let c = servers as f64;
    assert!(offered_load < c, "queue is unstable");
    // a^k / k! accumulated term by term
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..servers {
        term *= offered_load / k as f64;
        sum += term;
    }
    let top = term * offered_load / c / (1.0 - offered_load / c);
    top / (sum + top)
}

/// Mean time in system for M/M/c with arrival rate `lambda` and service
/// rate `mu` per server.
pub fn mmc_mean_response(lambda: f64, mu: f64, servers: usize) -> f64 {
    let wait = erlang_c(servers, lambda / mu) / (servers as f64 * mu - lambda);
    wait + 1.0 / mu
}
