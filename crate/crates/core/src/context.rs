//! Frame-indexed public context shared between perception and generation.
//!
//! The store is a ring of `K` slots (`K = 2` is the classic double buffer).
//! Perception publishes a fully built context into the slot of its frame and
//! then bumps the global version; generation stages read at an offset
//! relative to their own frame. Each slot holds an `Arc`, so a reader either
//! sees the previous entry or the new one, never a mix.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex, RwLock};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Frame index of the executor clock.
pub type Frame = u64;

/// Monotonic publication counter. `Version(0)` means nothing was published.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Version(pub u64);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ContextError {
    #[error("stale write: frame {frame} is older than the last published frame {last}")]
    StaleWrite { frame: Frame, last: Frame },
    #[error("no context published for frame {0}")]
    NotYetPublished(i64),
    #[error("offset {offset} out of range for a ring of {capacity} slots")]
    OffsetOutOfRange { offset: i64, capacity: usize },
    #[error("context kind mismatch: expected {expected:?}, found {found:?}")]
    KindMismatch { expected: ContextKind, found: ContextKind },
    #[error("invalid context: {0}")]
    Invalid(String),
    #[error("timed out waiting for frame {0}")]
    Timeout(Frame),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextKind {
    Autoregressive,
    Conditioning,
}

/// Kind-specific latent state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ContextPayload {
    Autoregressive {
        vision_tokens: Vec<Vec<f64>>,
        language_tokens: Vec<Vec<f64>>,
        action_tokens: Vec<u32>,
    },
    Conditioning {
        conditioning: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PublicContext {
    pub payload: ContextPayload,
    pub source_observation_id: u64,
    pub produced_frame: Frame,
    /// FNV-1a digest of everything above; written last by [`PublicContext::seal`].
    pub checksum: u64,
}

impl PublicContext {
    pub fn conditioning(conditioning: Vec<f64>, source_observation_id: u64) -> Self {
        Self::sealed(ContextPayload::Conditioning { conditioning }, source_observation_id)
    }

    pub fn autoregressive(
        vision_tokens: Vec<Vec<f64>>,
        language_tokens: Vec<Vec<f64>>,
        action_tokens: Vec<u32>,
        source_observation_id: u64,
    ) -> Self {
        Self::sealed(
            ContextPayload::Autoregressive {
                vision_tokens,
                language_tokens,
                action_tokens,
            },
            source_observation_id,
        )
    }

    fn sealed(payload: ContextPayload, source_observation_id: u64) -> Self {
        let mut ctx = Self {
            payload,
            source_observation_id,
            produced_frame: 0,
            checksum: 0,
        };
        ctx.seal();
        ctx
    }

    pub fn kind(&self) -> ContextKind {
        match self.payload {
            ContextPayload::Autoregressive { .. } => ContextKind::Autoregressive,
            ContextPayload::Conditioning { .. } => ContextKind::Conditioning,
        }
    }

    pub fn conditioning_vector(&self) -> Option<&[f64]> {
        match &self.payload {
            ContextPayload::Conditioning { conditioning } => Some(conditioning),
            _ => None,
        }
    }

    pub fn action_tokens(&self) -> Option<&[u32]> {
        match &self.payload {
            ContextPayload::Autoregressive { action_tokens, .. } => Some(action_tokens),
            _ => None,
        }
    }

    pub fn vision_tokens(&self) -> Option<&[Vec<f64>]> {
        match &self.payload {
            ContextPayload::Autoregressive { vision_tokens, .. } => Some(vision_tokens),
            _ => None,
        }
    }

    /// Copy with `action_tokens` replaced. Fails on a conditioning context.
    pub fn with_action_tokens(&self, tokens: &[u32]) -> Result<Self, ContextError> {
        let mut next = self.clone();
        match &mut next.payload {
            ContextPayload::Autoregressive { action_tokens, .. } => {
                action_tokens.clear();
                action_tokens.extend_from_slice(tokens);
            }
            ContextPayload::Conditioning { .. } => {
                return Err(ContextError::KindMismatch {
                    expected: ContextKind::Autoregressive,
                    found: ContextKind::Conditioning,
                })
            }
        }
        next.seal();
        Ok(next)
    }

    pub fn compute_checksum(&self) -> u64 {
        let mut h = Fnv::new();
        h.u64(self.source_observation_id);
        h.u64(self.produced_frame);
        match &self.payload {
            ContextPayload::Autoregressive {
                vision_tokens,
                language_tokens,
                action_tokens,
            } => {
                h.u64(1);
                for group in [vision_tokens, language_tokens] {
                    h.u64(group.len() as u64);
                    for v in group {
                        h.floats(v);
                    }
                }
                h.u64(action_tokens.len() as u64);
                for &t in action_tokens {
                    h.u64(t as u64);
                }
            }
            ContextPayload::Conditioning { conditioning } => {
                h.u64(2);
                h.floats(conditioning);
            }
        }
        h.finish()
    }

    pub fn seal(&mut self) {
        self.checksum = self.compute_checksum();
    }

    pub fn is_consistent(&self) -> bool {
        self.checksum == self.compute_checksum()
    }

    fn validate(&self, action_len: usize) -> Result<(), ContextError> {
        match &self.payload {
            ContextPayload::Autoregressive { action_tokens, .. } if action_tokens.len() > action_len => {
                Err(ContextError::Invalid(format!(
                    "{} action tokens exceed the configured length {action_len}",
                    action_tokens.len()
                )))
            }
            ContextPayload::Conditioning { conditioning } if conditioning.is_empty() => {
                Err(ContextError::Invalid("empty conditioning vector".into()))
            }
            _ => Ok(()),
        }
    }
}

struct Fnv(u64);

impl Fnv {
    fn new() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }

    fn u64(&mut self, v: u64) {
        for b in v.to_le_bytes() {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    fn floats(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        for x in v {
            self.u64(x.to_bits());
        }
    }

    fn finish(&self) -> u64 {
        self.0
    }
}

/// How reads of past frames treat action-token updates made after the
/// reader's frame began.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReadPolicy {
    /// Past-frame reads return the slot as it was when the current frame began.
    SnapshotAtFrameStart,
    /// Past-frame reads return the newest version of the slot.
    #[default]
    LiveLatest,
}

/// A context together with the version that published it.
#[derive(Debug, Clone)]
pub struct Fetched {
    pub context: Arc<PublicContext>,
    pub version: Version,
}

#[derive(Clone)]
struct SlotEntry {
    frame: Frame,
    version: Version,
    context: Arc<PublicContext>,
}

#[derive(Default)]
struct Slot {
    live: RwLock<Option<SlotEntry>>,
    snapshot: RwLock<Option<SlotEntry>>,
}

struct WriterState {
    last_frame: Option<Frame>,
    latest_slot: Option<usize>,
    pending_tokens: Option<(Frame, Vec<u32>)>,
}

pub struct ContextStore {
    slots: Vec<Slot>,
    version: AtomicU64,
    writer: Mutex<WriterState>,
    published: Condvar,
    action_len: usize,
    policy: ReadPolicy,
}

impl ContextStore {
    /// A ring of `capacity` slots (at least 2). `action_len` bounds the
    /// number of action tokens an autoregressive context may carry.
    pub fn new(capacity: usize, action_len: usize, policy: ReadPolicy) -> Result<Self, ContextError> {
        if capacity < 2 {
            return Err(ContextError::Invalid(format!("capacity {capacity} < 2")));
        }
        Ok(Self {
            slots: (0..capacity).map(|_| Slot::default()).collect(),
            version: AtomicU64::new(0),
            writer: Mutex::new(WriterState {
                last_frame: None,
                latest_slot: None,
                pending_tokens: None,
            }),
            published: Condvar::new(),
            action_len,
            policy,
        })
    }

    pub fn double_buffer(action_len: usize) -> Self {
        Self::new(2, action_len, ReadPolicy::default()).expect("capacity 2 is valid")
    }

    pub fn capacity(&self) -> usize {
        self.slots.len()
    }

    pub fn read_policy(&self) -> ReadPolicy {
        self.policy
    }

    pub fn version(&self) -> Version {
        Version(self.version.load(Ordering::SeqCst))
    }

    pub fn last_published_frame(&self) -> Option<Frame> {
        self.writer.lock().unwrap().last_frame
    }

    fn slot_of(&self, frame: Frame) -> usize {
        (frame % self.slots.len() as u64) as usize
    }

    /// Publishes `ctx` as the context of `frame`.
    ///
    /// Publishing twice in the same frame replaces the earlier context. An
    /// action-token update already made in this frame is carried into the
    /// new autoregressive context.
    pub fn publish(&self, mut ctx: PublicContext, frame: Frame) -> Result<Version, ContextError> {
        ctx.validate(self.action_len)?;
        let mut w = self.writer.lock().unwrap();
        if let Some(last) = w.last_frame {
            if frame < last {
                return Err(ContextError::StaleWrite { frame, last });
            }
        }
        if let (Some((f, tokens)), ContextPayload::Autoregressive { action_tokens, .. }) =
            (&w.pending_tokens, &mut ctx.payload)
        {
            if *f == frame {
                action_tokens.clone_from(tokens);
            }
        }
        ctx.produced_frame = frame;
        ctx.seal();
        let idx = self.slot_of(frame);
        let version = self.commit(idx, frame, ctx);
        w.last_frame = Some(frame);
        w.latest_slot = Some(idx);
        drop(w);
        self.published.notify_all();
        Ok(version)
    }

    /// Replaces the action tokens of the most recently published context.
    pub fn update_action_tokens(&self, frame: Frame, tokens: &[u32]) -> Result<Version, ContextError> {
        if tokens.len() > self.action_len {
            return Err(ContextError::Invalid(format!(
                "{} action tokens exceed the configured length {}",
                tokens.len(),
                self.action_len
            )));
        }
        let mut w = self.writer.lock().unwrap();
        let idx = w.latest_slot.ok_or(ContextError::NotYetPublished(frame as i64))?;
        if let Some(last) = w.last_frame {
            if frame < last {
                return Err(ContextError::StaleWrite { frame, last });
            }
        }
        let current = self.slots[idx]
            .live
            .read()
            .unwrap()
            .clone()
            .expect("latest slot is filled");
        let next = current.context.with_action_tokens(tokens)?;
        let version = self.commit(idx, current.frame, next);
        w.pending_tokens = Some((frame, tokens.to_vec()));
        drop(w);
        self.published.notify_all();
        Ok(version)
    }

    fn commit(&self, idx: usize, frame: Frame, ctx: PublicContext) -> Version {
        // The slot is fully written before the version becomes visible.
        let version = Version(self.version.load(Ordering::SeqCst) + 1);
        *self.slots[idx].live.write().unwrap() = Some(SlotEntry {
            frame,
            version,
            context: Arc::new(ctx),
        });
        self.version.store(version.0, Ordering::SeqCst);
        version
    }

    /// Marks the start of `frame` for [`ReadPolicy::SnapshotAtFrameStart`]
    /// readers. A no-op under the live policy.
    pub fn begin_frame(&self, _frame: Frame) {
        if self.policy == ReadPolicy::LiveLatest {
            return;
        }
        for slot in &self.slots {
            let live = slot.live.read().unwrap().clone();
            *slot.snapshot.write().unwrap() = live;
        }
    }

    fn target(&self, frame: Frame, offset: i64) -> Result<i64, ContextError> {
        if offset > 0 || offset.unsigned_abs() as usize >= self.slots.len() {
            return Err(ContextError::OffsetOutOfRange {
                offset,
                capacity: self.slots.len(),
            });
        }
        Ok(frame as i64 + offset)
    }

    /// Context published for `frame + offset`.
    pub fn fetch(&self, frame: Frame, offset: i64) -> Result<Fetched, ContextError> {
        let target = self.target(frame, offset)?;
        if target < 0 {
            return Err(ContextError::NotYetPublished(target));
        }
        let target_frame = target as Frame;
        let slot = &self.slots[self.slot_of(target_frame)];
        let use_snapshot = offset < 0 && self.policy == ReadPolicy::SnapshotAtFrameStart;
        let entry = if use_snapshot {
            slot.snapshot.read().unwrap().clone()
        } else {
            slot.live.read().unwrap().clone()
        };
        match entry {
            Some(e) if e.frame == target_frame => Ok(Fetched {
                context: e.context,
                version: e.version,
            }),
            _ => Err(ContextError::NotYetPublished(target)),
        }
    }

    /// Blocking variant of [`ContextStore::fetch`] for concurrent executors.
    pub fn wait_fetch(&self, frame: Frame, offset: i64, timeout: Duration) -> Result<Fetched, ContextError> {
        let target = self.target(frame, offset)?;
        let deadline = Instant::now() + timeout;
        let mut guard = self.writer.lock().unwrap();
        loop {
            match self.fetch(frame, offset) {
                Ok(f) => return Ok(f),
                Err(ContextError::NotYetPublished(_)) => {}
                Err(e) => return Err(e),
            }
            let now = Instant::now();
            if now >= deadline {
                return Err(ContextError::Timeout(target.max(0) as Frame));
            }
            guard = self.published.wait_timeout(guard, deadline - now).unwrap().0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;
    use std::sync::atomic::AtomicBool;

    fn cond(v: f64, obs: u64) -> PublicContext {
        PublicContext::conditioning(vec![v, -v], obs)
    }

    fn ar(v: f64, obs: u64) -> PublicContext {
        PublicContext::autoregressive(vec![vec![v, v]], vec![vec![1.0, 0.0]], vec![], obs)
    }

    /// Single-threaded reference: the last context written per frame.
    #[derive(Default)]
    struct ReferenceLog {
        by_frame: BTreeMap<Frame, PublicContext>,
    }

    impl ReferenceLog {
        fn publish(&mut self, mut ctx: PublicContext, frame: Frame, pending: Option<&(Frame, Vec<u32>)>) {
            if let (Some((f, t)), ContextPayload::Autoregressive { action_tokens, .. }) = (pending, &mut ctx.payload) {
                if *f == frame {
                    *action_tokens = t.clone();
                }
            }
            ctx.produced_frame = frame;
            ctx.seal();
            self.by_frame.insert(frame, ctx);
        }

        fn update(&mut self, tokens: &[u32]) {
            let (_, ctx) = self.by_frame.iter_mut().next_back().unwrap();
            *ctx = ctx.with_action_tokens(tokens).unwrap();
        }

        fn fetch(&self, frame: Frame, offset: i64) -> Option<&PublicContext> {
            let t = frame as i64 + offset;
            (t >= 0).then(|| self.by_frame.get(&(t as u64))).flatten()
        }
    }

    #[test]
    fn first_publication_is_version_one() {
        let store = ContextStore::double_buffer(7);
        assert_eq!(store.publish(cond(1.0, 0), 0).unwrap(), Version(1));
    }

    #[test]
    fn ring_semantics() {
        let store = ContextStore::double_buffer(7);
        for f in 0..3 {
            store.publish(cond(f as f64, f), f).unwrap();
        }
        let prev = store.fetch(2, -1).unwrap();
        assert_eq!(prev.context.produced_frame, 1);
        assert_eq!(prev.context.conditioning_vector().unwrap(), &[1.0, -1.0]);
        assert!(matches!(store.fetch(2, -2), Err(ContextError::OffsetOutOfRange { .. })));
        // Frame 0 was evicted by frame 2.
        assert!(matches!(store.fetch(1, -1), Err(ContextError::NotYetPublished(0))));
    }

    #[test]
    fn fetch_identity_and_previous_frame() {
        let store = ContextStore::double_buffer(7);
        store.publish(cond(4.0, 4), 4).unwrap();
        store.publish(cond(5.0, 5), 5).unwrap();
        let same = store.fetch(5, 0).unwrap();
        assert_eq!(same.context.source_observation_id, 5);
        assert_eq!(store.fetch(5, -1).unwrap().context.produced_frame, 4);
        assert!(matches!(store.fetch(6, 0), Err(ContextError::NotYetPublished(6))));
    }

    #[test]
    fn stale_write_rejected() {
        let store = ContextStore::double_buffer(7);
        store.publish(cond(1.0, 3), 3).unwrap();
        assert_eq!(
            store.publish(cond(1.0, 2), 2),
            Err(ContextError::StaleWrite { frame: 2, last: 3 })
        );
    }

    #[test]
    fn same_frame_publish_supersedes() {
        let store = ContextStore::double_buffer(7);
        let v1 = store.publish(ar(1.0, 0), 0).unwrap();
        store.update_action_tokens(0, &[3]).unwrap();
        let v2 = store.publish(ar(2.0, 1), 0).unwrap();
        assert!(v2 > v1);

        let mut reference = ReferenceLog::default();
        reference.publish(ar(1.0, 0), 0, None);
        reference.update(&[3]);
        reference.publish(ar(2.0, 1), 0, Some(&(0, vec![3])));
        assert_eq!(*store.fetch(0, 0).unwrap().context, *reference.fetch(0, 0).unwrap());
    }

    #[test]
    fn action_token_updates() {
        let store = ContextStore::double_buffer(7);
        store.publish(ar(1.0, 0), 0).unwrap();
        store.update_action_tokens(0, &[4, 9]).unwrap();
        let got = store.fetch(0, 0).unwrap();
        assert_eq!(got.context.action_tokens().unwrap(), &[4, 9]);
        assert_eq!(got.context.vision_tokens().unwrap(), &[vec![1.0, 1.0]]);
        store.update_action_tokens(0, &[]).unwrap();
        assert!(store.fetch(0, 0).unwrap().context.action_tokens().unwrap().is_empty());
        assert!(store.update_action_tokens(0, &[0; 8]).is_err());
    }

    #[test]
    fn token_update_on_conditioning_is_kind_mismatch() {
        let store = ContextStore::double_buffer(7);
        store.publish(cond(1.0, 0), 0).unwrap();
        assert!(matches!(
            store.update_action_tokens(0, &[1]),
            Err(ContextError::KindMismatch { .. })
        ));
    }

    #[test]
    fn interleaved_publish_and_update_keep_latest_tokens() {
        // Token update first, perception publish second.
        let store = ContextStore::double_buffer(7);
        store.publish(ar(1.0, 0), 0).unwrap();
        store.update_action_tokens(1, &[5, 6]).unwrap();
        store.publish(ar(2.0, 1), 1).unwrap();
        let got = store.fetch(1, 0).unwrap().context;
        assert_eq!(got.vision_tokens().unwrap(), &[vec![2.0, 2.0]]);
        assert_eq!(got.action_tokens().unwrap(), &[5, 6]);

        // Perception publish first, token update second.
        let store = ContextStore::double_buffer(7);
        store.publish(ar(1.0, 0), 0).unwrap();
        store.publish(ar(2.0, 1), 1).unwrap();
        store.update_action_tokens(1, &[5, 6]).unwrap();
        let got2 = store.fetch(1, 0).unwrap().context;
        assert_eq!(got.vision_tokens(), got2.vision_tokens());
        assert_eq!(got.action_tokens(), got2.action_tokens());
    }

    #[test]
    fn snapshot_policy_hides_mid_frame_updates() {
        let store = ContextStore::new(2, 7, ReadPolicy::SnapshotAtFrameStart).unwrap();
        store.publish(ar(1.0, 0), 0).unwrap();
        store.begin_frame(1);
        store.update_action_tokens(1, &[2]).unwrap();
        assert!(store.fetch(1, -1).unwrap().context.action_tokens().unwrap().is_empty());

        let live = ContextStore::new(2, 7, ReadPolicy::LiveLatest).unwrap();
        live.publish(ar(1.0, 0), 0).unwrap();
        live.begin_frame(1);
        live.update_action_tokens(1, &[2]).unwrap();
        assert_eq!(live.fetch(1, -1).unwrap().context.action_tokens().unwrap(), &[2]);
    }

    #[test]
    fn capacity_must_be_at_least_two() {
        assert!(ContextStore::new(1, 7, ReadPolicy::LiveLatest).is_err());
        let store = ContextStore::new(4, 7, ReadPolicy::LiveLatest).unwrap();
        for f in 0..6 {
            store.publish(cond(f as f64, f), f).unwrap();
        }
        assert_eq!(store.fetch(5, -3).unwrap().context.produced_frame, 2);
    }

    #[test]
    fn concurrent_readers_never_see_torn_contexts() {
        let store = Arc::new(ContextStore::double_buffer(7));
        store.publish(cond(0.0, 0), 0).unwrap();
        let stop = Arc::new(AtomicBool::new(false));
        let readers: Vec<_> = (0..4)
            .map(|_| {
                let store = Arc::clone(&store);
                let stop = Arc::clone(&stop);
                std::thread::spawn(move || {
                    let mut last = Version(0);
                    let mut reads = 0u64;
                    while !stop.load(Ordering::Relaxed) {
                        let Some(frame) = store.last_published_frame() else {
                            continue;
                        };
                        for offset in [0, -1] {
                            if let Ok(f) = store.fetch(frame, offset) {
                                assert!(f.context.is_consistent());
                                reads += 1;
                            }
                        }
                        let v = store.version();
                        assert!(v >= last);
                        last = v;
                    }
                    reads
                })
            })
            .collect();
        for f in 1..20_000u64 {
            let payload: Vec<f64> = (0..16).map(|i| (f * 16 + i) as f64).collect();
            store.publish(PublicContext::conditioning(payload, f), f).unwrap();
        }
        stop.store(true, Ordering::Relaxed);
        let total: u64 = readers.into_iter().map(|h| h.join().unwrap()).sum();
        assert!(total > 0);
    }

    #[test]
    fn wait_fetch_blocks_until_published() {
        let store = Arc::new(ContextStore::double_buffer(7));
        let writer = {
            let store = Arc::clone(&store);
            std::thread::spawn(move || {
                std::thread::sleep(Duration::from_millis(20));
                store.publish(cond(7.0, 3), 3).unwrap();
            })
        };
        let got = store.wait_fetch(3, 0, Duration::from_secs(5)).unwrap();
        assert_eq!(got.context.source_observation_id, 3);
        writer.join().unwrap();
        assert!(matches!(
            store.wait_fetch(9, 0, Duration::from_millis(10)),
            Err(ContextError::Timeout(9))
        ));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        #[derive(Debug, Clone)]
        enum Op {
            Advance(u8),
            Publish(i16),
            Tokens(Vec<u32>),
        }

        fn op() -> impl Strategy<Value = Op> {
            prop_oneof![
                (0u8..3).prop_map(Op::Advance),
                (-50i16..50).prop_map(Op::Publish),
                prop::collection::vec(0u32..17, 0..7).prop_map(Op::Tokens),
            ]
        }

        proptest! {
            #[test]
            fn matches_reference_log(ops in prop::collection::vec(op(), 1..60), capacity in 2usize..5) {
                let store = ContextStore::new(capacity, 7, ReadPolicy::LiveLatest).unwrap();
                let mut reference = ReferenceLog::default();
                let mut pending: Option<(Frame, Vec<u32>)> = None;
                let mut frame: Frame = 0;
                let mut obs = 0;
                let mut last_version = Version(0);
                for op in ops {
                    match op {
                        Op::Advance(d) => frame += d as u64,
                        Op::Publish(v) => {
                            obs += 1;
                            let ctx = ar(v as f64, obs);
                            let version = store.publish(ctx.clone(), frame).unwrap();
                            prop_assert!(version > last_version);
                            last_version = version;
                            reference.publish(ctx, frame, pending.as_ref());
                        }
                        Op::Tokens(t) => {
                            if reference.by_frame.is_empty() {
                                prop_assert!(store.update_action_tokens(frame, &t).is_err());
                                continue;
                            }
                            let version = store.update_action_tokens(frame, &t).unwrap();
                            prop_assert!(version > last_version);
                            last_version = version;
                            reference.update(&t);
                            pending = Some((frame, t));
                        }
                    }
                    for d in 0..capacity as i64 {
                        let got = store.fetch(frame, -d).ok().map(|f| (*f.context).clone());
                        prop_assert_eq!(got.as_ref(), reference.fetch(frame, -d));
                    }
                }
            }
        }
    }
}
