use std::collections::VecDeque;
use std::sync::{Arc, Mutex};

use super::datagram::{parse_fragment, Partial};
use crate::protocol::{decode, MsgType, WireMessage};

const RETIRED_KEYS: usize = 256;

/// Message-level receive counters.
///
/// Every received message ends up in exactly one of `exposed`,
/// `dropped_stale`, `corrupt`, or is still pending reassembly, so
/// `received == exposed + dropped_stale + corrupt + pending` always holds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counters {
    pub received: u64,
    pub exposed: u64,
    pub dropped_stale: u64,
    pub corrupt: u64,
    pub pending: u64,
    /// Fragments of already finished or duplicate messages. Not messages,
    /// so outside the identity above.
    pub late_fragments: u64,
}

impl Counters {
    pub fn is_consistent(&self) -> bool {
        self.received == self.exposed + self.dropped_stale + self.corrupt + self.pending
    }
}

fn slot(t: MsgType) -> usize {
    match t {
        MsgType::PointCloud => 0,
        MsgType::WristRgb => 1,
    }
}

/// Latest-wins receive state for one connection.
#[derive(Debug)]
pub struct ReceiverState {
    latest: [Option<Arc<WireMessage>>; 2],
    counters: Counters,
    capacity: usize,
    partials: Vec<Partial>,
    retired: VecDeque<(u64, u16)>,
}

impl ReceiverState {
    /// `receive_buffer_frames` bounds the datagram reassembly buffer.
    pub fn new(receive_buffer_frames: usize) -> Self {
        ReceiverState {
            latest: [None, None],
            counters: Counters::default(),
            capacity: receive_buffer_frames.max(1),
            partials: Vec::new(),
            retired: VecDeque::with_capacity(RETIRED_KEYS),
        }
    }

    pub fn counters(&self) -> Counters {
        Counters {
            pending: self.partials.len() as u64,
            ..self.counters
        }
    }

    pub fn latest(&self, t: MsgType) -> Option<Arc<WireMessage>> {
        self.latest[slot(t)].clone()
    }

    fn last_seen(&self, t: MsgType) -> Option<u64> {
        self.latest[slot(t)].as_ref().map(|m| m.frame_id())
    }

    fn is_stale(&self, msg_type: u16, frame_id: u64) -> bool {
        MsgType::from_u16(msg_type)
            .and_then(|t| self.last_seen(t))
            .is_some_and(|seen| frame_id <= seen)
    }

    /// Ingests one complete message (stream framing). Returns the message
    /// if it became the newest of its type.
    pub fn ingest_message(&mut self, bytes: &[u8]) -> Option<Arc<WireMessage>> {
        self.counters.received += 1;
        self.classify(bytes)
    }

    fn classify(&mut self, bytes: &[u8]) -> Option<Arc<WireMessage>> {
        let msg = match decode(bytes) {
            Ok(m) => m,
            Err(e) => {
                log::debug!("discarding corrupt message: {e}");
                self.counters.corrupt += 1;
                return None;
            }
        };
        let t = msg.msg_type();
        if self.last_seen(t).is_some_and(|seen| msg.frame_id() <= seen) {
            self.counters.dropped_stale += 1;
            return None;
        }
        let frame_id = msg.frame_id();
        let msg = Arc::new(msg);
        self.latest[slot(t)] = Some(Arc::clone(&msg));
        self.counters.exposed += 1;
        self.discard_stale_partials(t as u16, frame_id);
        Some(msg)
    }

    fn discard_stale_partials(&mut self, msg_type: u16, frame_id: u64) {
        let mut i = 0;
        while i < self.partials.len() {
            let p = &self.partials[i];
            if p.msg_type == msg_type && p.frame_id <= frame_id {
                let p = self.partials.swap_remove(i);
                self.retire(p.key());
                self.counters.dropped_stale += 1;
            } else {
                i += 1;
            }
        }
    }

    fn retire(&mut self, key: (u64, u16)) {
        if self.retired.len() == RETIRED_KEYS {
            self.retired.pop_front();
        }
        self.retired.push_back(key);
    }

    /// Ingests one datagram fragment. Returns a message once it is fully
    /// reassembled, validated, and newer than anything exposed before.
    pub fn ingest_datagram(&mut self, datagram: &[u8]) -> Option<Arc<WireMessage>> {
        let Some((h, body)) = parse_fragment(datagram) else {
            self.counters.received += 1;
            self.counters.corrupt += 1;
            return None;
        };
        let key = (h.frame_id, h.msg_type);
        if self.retired.contains(&key) {
            self.counters.late_fragments += 1;
            return None;
        }
        if let Some(pos) = self.partials.iter().position(|p| p.key() == key) {
            let p = &mut self.partials[pos];
            if p.parts.len() != h.count as usize {
                // inconsistent with the fragments seen so far
                self.counters.received += 1;
                self.counters.corrupt += 1;
                return None;
            }
            if !p.insert(h.index, body) {
                self.counters.late_fragments += 1;
                return None;
            }
            if !p.is_complete() {
                return None;
            }
            let p = self.partials.swap_remove(pos);
            self.retire(key);
            return self.classify(&p.assemble());
        }

        self.counters.received += 1;
        if self.is_stale(h.msg_type, h.frame_id) {
            self.counters.dropped_stale += 1;
            self.retire(key);
            return None;
        }
        let mut p = Partial::new(&h);
        p.insert(h.index, body);
        if p.is_complete() {
            self.retire(key);
            return self.classify(&p.assemble());
        }
        self.partials.push(p);
        if self.partials.len() > self.capacity {
            // evict the oldest incomplete message
            let oldest = (0..self.partials.len())
                .min_by_key(|&i| self.partials[i].key())
                .unwrap();
            let p = self.partials.swap_remove(oldest);
            log::debug!("evicting incomplete frame {} (type {})", p.frame_id, p.msg_type);
            self.retire(p.key());
            self.counters.corrupt += 1;
        }
        None
    }
}

/// The newest complete message of type `t`, if any.
pub fn receive_latest(state: &ReceiverState, t: MsgType) -> Option<Arc<WireMessage>> {
    state.latest(t)
}

/// Receiver state shared between one reader thread and any number of
/// consumers.
#[derive(Clone, Debug)]
pub struct SharedReceiver(Arc<Mutex<ReceiverState>>);

impl SharedReceiver {
    pub fn new(receive_buffer_frames: usize) -> Self {
        SharedReceiver(Arc::new(Mutex::new(ReceiverState::new(receive_buffer_frames))))
    }

    pub fn ingest_message(&self, bytes: &[u8]) -> Option<Arc<WireMessage>> {
        self.lock().ingest_message(bytes)
    }

    pub fn ingest_datagram(&self, datagram: &[u8]) -> Option<Arc<WireMessage>> {
        self.lock().ingest_datagram(datagram)
    }

    pub fn latest(&self, t: MsgType) -> Option<Arc<WireMessage>> {
        self.lock().latest(t)
    }

    pub fn counters(&self) -> Counters {
        self.lock().counters()
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, ReceiverState> {
        // a panicking reader leaves the state itself consistent
        self.0.lock().unwrap_or_else(|e| e.into_inner())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::PointCloud;
    use crate::protocol::encode_cloud;
    use crate::transport::fragment;

    fn msg(frame_id: u64, n: usize) -> Vec<u8> {
        let mut c = PointCloud::new(frame_id, frame_id * 100);
        for i in 0..n {
            c.push([i as f32, 1.0, 2.0], [3, 4, 5]);
        }
        encode_cloud(&c).unwrap()
    }

    fn exposed_id(s: &ReceiverState) -> Option<u64> {
        s.latest(MsgType::PointCloud).map(|m| m.frame_id())
    }

    #[test]
    fn in_order_frames() {
        let mut s = ReceiverState::new(2);
        for f in 1..=3 {
            assert!(s.ingest_message(&msg(f, 3)).is_some());
        }
        assert_eq!(exposed_id(&s), Some(3));
        assert_eq!(s.counters().exposed, 3);
    }

    #[test]
    fn reordered_frame_is_stale() {
        let mut s = ReceiverState::new(2);
        for f in [1, 3, 2] {
            s.ingest_message(&msg(f, 3));
        }
        assert_eq!(exposed_id(&s), Some(3));
        let c = s.counters();
        assert_eq!(c.dropped_stale, 1);
        assert!(c.is_consistent());
    }

    #[test]
    fn corrupt_message_counted() {
        let mut s = ReceiverState::new(2);
        let mut m = msg(1, 2);
        m[0] = b'X';
        assert!(s.ingest_message(&m).is_none());
        assert_eq!(s.counters().corrupt, 1);
        assert_eq!(receive_latest(&s, MsgType::PointCloud), None);
    }

    #[test]
    fn datagram_reassembly_and_eviction() {
        let mut s = ReceiverState::new(2);
        let a = fragment(&msg(1, 200), 500).unwrap();
        let b = fragment(&msg(2, 200), 500).unwrap();
        let c = fragment(&msg(3, 200), 500).unwrap();
        // partial 1 and 2, then all of 3: 1 gets evicted when 3 starts,
        // 2 is discarded as stale once 3 completes
        s.ingest_datagram(&a[0]);
        s.ingest_datagram(&b[0]);
        for d in &c {
            s.ingest_datagram(d);
        }
        assert_eq!(exposed_id(&s), Some(3));
        let k = s.counters();
        assert_eq!((k.received, k.exposed, k.corrupt, k.dropped_stale, k.pending), (3, 1, 1, 1, 0));
        // trailing fragments of finished frames are ignored
        s.ingest_datagram(&a[1]);
        s.ingest_datagram(&b[1]);
        assert_eq!(s.counters().late_fragments, 2);
        assert!(s.counters().is_consistent());
    }

    #[test]
    fn garbage_datagram_is_corrupt() {
        let mut s = ReceiverState::new(2);
        s.ingest_datagram(&[1, 2, 3]);
        assert_eq!(s.counters().corrupt, 1);
        assert!(s.counters().is_consistent());
    }

    #[test]
    fn shared_receiver_across_threads() {
        let shared = SharedReceiver::new(2);
        let writer = shared.clone();
        let h = std::thread::spawn(move || {
            for f in 1..=50 {
                writer.ingest_message(&msg(f, 10));
            }
        });
        let mut last = 0;
        while !h.is_finished() {
            if let Some(m) = shared.latest(MsgType::PointCloud) {
                assert!(m.frame_id() >= last);
                last = m.frame_id();
            }
        }
        h.join().unwrap();
        assert_eq!(shared.latest(MsgType::PointCloud).unwrap().frame_id(), 50);
    }
}
