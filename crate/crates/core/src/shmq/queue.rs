//! Circular single-producer single-consumer queue over fixed-size slots.
//!
//! The only shared state is the slot array. The producer keeps its tail and
//! the consumer its head in private memory; the last byte of each slot says
//! who owns it. Ownership is handed over with release stores and observed
//! with acquire loads.

use std::alloc::{self, Layout};
use std::fmt;
use std::sync::atomic::{AtomicU8, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use crate::backoff::Backoff;
use crate::proto::{OWNER_BIT, TYPE_MASK};

/// Memory a queue lives in. Implementations keep the mapping alive.
pub(crate) trait Backing: Send + Sync {
    fn base(&self) -> *mut u8;
    fn size(&self) -> usize;
}

struct HeapBacking {
    ptr: *mut u8,
    layout: Layout,
}

// SAFETY: the allocation is only accessed through queue handles, which
// synchronize through the per-slot owner byte.
unsafe impl Send for HeapBacking {}
unsafe impl Sync for HeapBacking {}

impl HeapBacking {
    fn new(size: usize) -> Self {
        let layout = Layout::from_size_align(size.max(64), 64).expect("queue layout");
        // SAFETY: layout has non-zero size.
        let ptr = unsafe { alloc::alloc_zeroed(layout) };
        if ptr.is_null() {
            alloc::handle_alloc_error(layout);
        }
        HeapBacking { ptr, layout }
    }
}

impl Drop for HeapBacking {
    fn drop(&mut self) {
        // SAFETY: allocated in `new` with the same layout.
        unsafe { alloc::dealloc(self.ptr, self.layout) }
    }
}

impl Backing for HeapBacking {
    fn base(&self) -> *mut u8 {
        self.ptr
    }
    fn size(&self) -> usize {
        self.layout.size()
    }
}

/// Returned by the timed producer path when no slot frees up in time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WouldBlock;

impl fmt::Display for WouldBlock {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("queue full")
    }
}

impl std::error::Error for WouldBlock {}

#[derive(Clone)]
struct Geometry {
    backing: Arc<dyn Backing>,
    offset: usize,
    slot_size: usize,
    len: usize,
}

impl Geometry {
    fn new(backing: Arc<dyn Backing>, offset: usize, slot_size: usize, len: usize) -> Self {
        assert!(slot_size >= 2 && len >= 1);
        assert!(offset + slot_size * len <= backing.size(), "queue exceeds its backing");
        Geometry { backing, offset, slot_size, len }
    }

    fn slot(&self, idx: usize) -> *mut u8 {
        debug_assert!(idx < self.len);
        // SAFETY: bounds checked at construction.
        unsafe { self.backing.base().add(self.offset + idx * self.slot_size) }
    }

    fn meta(&self, idx: usize) -> &AtomicU8 {
        // SAFETY: the metadata byte is in bounds and only ever accessed atomically.
        unsafe { &*(self.slot(idx).add(self.slot_size - 1) as *const AtomicU8) }
    }
}

/// Producer half of a queue.
pub struct Producer {
    geo: Geometry,
    tail: usize,
}

/// Consumer half of a queue.
pub struct Consumer {
    geo: Geometry,
    head: usize,
}

impl fmt::Debug for Producer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Producer")
            .field("slot_size", &self.geo.slot_size)
            .field("len", &self.geo.len)
            .field("tail", &self.tail)
            .finish()
    }
}

impl fmt::Debug for Consumer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Consumer")
            .field("slot_size", &self.geo.slot_size)
            .field("len", &self.geo.len)
            .field("head", &self.head)
            .finish()
    }
}

pub(crate) fn queue_pair(
    backing: Arc<dyn Backing>,
    offset: usize,
    slot_size: usize,
    len: usize,
) -> (Producer, Consumer) {
    let geo = Geometry::new(backing, offset, slot_size, len);
    (Producer { geo: geo.clone(), tail: 0 }, Consumer { geo, head: 0 })
}

/// A queue in process-local heap memory with the same slot protocol as the
/// shared-memory variant. Slots start producer-owned.
pub fn heap_queue(slot_size: usize, len: usize) -> (Producer, Consumer) {
    let backing: Arc<dyn Backing> = Arc::new(HeapBacking::new(slot_size * len));
    queue_pair(backing, 0, slot_size, len)
}

impl Producer {
    pub fn slot_size(&self) -> usize {
        self.geo.slot_size
    }

    pub fn queue_len(&self) -> usize {
        self.geo.len
    }

    pub fn tail(&self) -> usize {
        self.tail
    }

    fn tail_free(&self) -> bool {
        self.geo.meta(self.tail).load(Ordering::Acquire) & OWNER_BIT == 0
    }

    /// The slot at the local tail if the consumer has handed it back.
    pub fn try_alloc(&mut self) -> Option<SlotWriter<'_>> {
        if self.tail_free() {
            Some(SlotWriter { producer: self })
        } else {
            None
        }
    }

    /// Waits for the slot at the local tail to become producer-owned.
    pub fn alloc(&mut self) -> SlotWriter<'_> {
        let mut backoff = Backoff::new();
        while !self.tail_free() {
            backoff.snooze();
        }
        SlotWriter { producer: self }
    }

    pub fn alloc_timeout(&mut self, timeout: Duration) -> Result<SlotWriter<'_>, WouldBlock> {
        let deadline = Instant::now() + timeout;
        let mut backoff = Backoff::new();
        while !self.tail_free() {
            if Instant::now() >= deadline {
                return Err(WouldBlock);
            }
            backoff.snooze();
        }
        Ok(SlotWriter { producer: self })
    }

    /// Owner bit of a slot, for diagnostics.
    pub fn consumer_owns(&self, idx: usize) -> bool {
        self.geo.meta(idx).load(Ordering::Acquire) & OWNER_BIT != 0
    }
}

/// Writable slot obtained from [`Producer::alloc`]. Dropping it without
/// calling [`SlotWriter::enqueue`] leaves the slot with the producer.
pub struct SlotWriter<'a> {
    producer: &'a mut Producer,
}

impl SlotWriter<'_> {
    /// Slot bytes excluding the trailing metadata byte.
    pub fn body(&mut self) -> &mut [u8] {
        let geo = &self.producer.geo;
        // SAFETY: the slot is producer-owned, so the consumer does not touch it
        // until the release store in `enqueue`.
        unsafe { std::slice::from_raw_parts_mut(geo.slot(self.producer.tail), geo.slot_size - 1) }
    }

    /// Publishes the slot to the consumer with the given type code.
    pub fn enqueue(self, type_code: u8) {
        let p = self.producer;
        p.geo.meta(p.tail).store(OWNER_BIT | (type_code & TYPE_MASK), Ordering::Release);
        p.tail = (p.tail + 1) % p.geo.len;
    }
}

impl Consumer {
    pub fn slot_size(&self) -> usize {
        self.geo.slot_size
    }

    pub fn queue_len(&self) -> usize {
        self.geo.len
    }

    pub fn head(&self) -> usize {
        self.head
    }

    /// True if a message is waiting at the local head.
    pub fn ready(&self) -> bool {
        self.geo.meta(self.head).load(Ordering::Acquire) & OWNER_BIT != 0
    }

    /// Takes the message at the local head, if the producer has published one.
    pub fn poll(&mut self) -> Option<SlotReader<'_>> {
        let meta = self.geo.meta(self.head).load(Ordering::Acquire);
        if meta & OWNER_BIT == 0 {
            return None;
        }
        let idx = self.head;
        self.head = (self.head + 1) % self.geo.len;
        Some(SlotReader { geo: &self.geo, idx, type_code: meta & TYPE_MASK })
    }
}

/// Readable slot obtained from [`Consumer::poll`]. The slot goes back to the
/// producer on [`SlotReader::release`] or drop; its bytes must not be used
/// afterwards, which the borrow enforces.
pub struct SlotReader<'a> {
    geo: &'a Geometry,
    idx: usize,
    type_code: u8,
}

impl SlotReader<'_> {
    pub fn type_code(&self) -> u8 {
        self.type_code
    }

    /// Slot bytes excluding the trailing metadata byte.
    pub fn body(&self) -> &[u8] {
        // SAFETY: consumer-owned until release; the producer does not write it.
        unsafe { std::slice::from_raw_parts(self.geo.slot(self.idx), self.geo.slot_size - 1) }
    }

    pub fn release(self) {}
}

impl Drop for SlotReader<'_> {
    fn drop(&mut self) {
        self.geo.meta(self.idx).store(self.type_code & TYPE_MASK, Ordering::Release);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::thread;

    fn push(p: &mut Producer, v: u64) {
        let mut slot = p.alloc();
        slot.body()[..8].copy_from_slice(&v.to_le_bytes());
        slot.enqueue(1);
    }

    fn pop(c: &mut Consumer) -> Option<u64> {
        let slot = c.poll()?;
        let v = u64::from_le_bytes(slot.body()[..8].try_into().unwrap());
        slot.release();
        Some(v)
    }

    #[test]
    fn fifo_single_thread() {
        let (mut p, mut c) = heap_queue(128, 4);
        for i in 0..3 {
            push(&mut p, i);
            assert_eq!(pop(&mut c), Some(i));
        }
        assert_eq!(pop(&mut c), None);
    }

    #[test]
    fn full_queue_blocks_until_release() {
        let (mut p, mut c) = heap_queue(128, 4);
        for i in 0..4 {
            push(&mut p, i);
        }
        assert!(p.try_alloc().is_none());
        assert_eq!(p.alloc_timeout(Duration::from_millis(5)).err(), Some(WouldBlock));
        assert_eq!(pop(&mut c), Some(0));
        assert!(p.try_alloc().is_some());
    }

    #[test]
    fn ownership_alternates() {
        let (mut p, mut c) = heap_queue(128, 2);
        assert!(!p.consumer_owns(0));
        push(&mut p, 1);
        assert!(p.consumer_owns(0));
        let slot = c.poll().unwrap();
        assert!(p.consumer_owns(0), "owner stays consumer until release");
        slot.release();
        assert!(!p.consumer_owns(0));
    }

    #[test]
    fn type_code_preserved_and_owner_masked() {
        let (mut p, mut c) = heap_queue(128, 2);
        p.alloc().enqueue(0x30);
        assert_eq!(c.poll().unwrap().type_code(), 0x30);
    }

    #[test]
    fn tiny_queue_with_slow_consumer() {
        let (mut p, mut c) = heap_queue(128, 2);
        let prod = thread::spawn(move || {
            for i in 0..100 {
                push(&mut p, i);
            }
        });
        let mut got = Vec::new();
        while got.len() < 100 {
            if let Some(v) = pop(&mut c) {
                got.push(v);
                thread::sleep(Duration::from_micros(20));
            } else {
                thread::yield_now();
            }
        }
        prod.join().unwrap();
        assert_eq!(got, (0..100).collect::<Vec<_>>());
    }
}
