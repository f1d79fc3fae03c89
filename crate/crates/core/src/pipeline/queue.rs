//! Bounded FIFO shared by exactly one producer and one consumer.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::Instant;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverflowPolicy {
    /// The producer waits for space.
    Block,
    /// The oldest queued item is evicted to make room.
    DropOldest,
}

/// Returned when offering to a closed queue; hands the item back.
#[derive(Debug, PartialEq, Eq)]
pub struct Closed<T>(pub T);

#[derive(Debug, PartialEq, Eq)]
pub enum Take<T> {
    Item(T),
    Timeout,
    Closed,
}

struct State<T> {
    items: VecDeque<T>,
    closed: bool,
    drops: u64,
}

pub struct BoundedQueue<T> {
    state: Mutex<State<T>>,
    not_empty: Condvar,
    not_full: Condvar,
    capacity: usize,
    policy: OverflowPolicy,
    gauge: Option<Arc<AtomicUsize>>,
}

impl<T> BoundedQueue<T> {
    pub fn new(capacity: usize, policy: OverflowPolicy) -> Self {
        assert!(capacity > 0, "queue capacity must be positive");
        Self {
            state: Mutex::new(State {
                items: VecDeque::with_capacity(capacity),
                closed: false,
                drops: 0,
            }),
            not_empty: Condvar::new(),
            not_full: Condvar::new(),
            capacity,
            policy,
            gauge: None,
        }
    }

    /// Mirror the queue depth into `gauge` on every change.
    pub fn with_gauge(mut self, gauge: Arc<AtomicUsize>) -> Self {
        self.gauge = Some(gauge);
        self
    }

    fn lock(&self) -> MutexGuard<'_, State<T>> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn publish(&self, depth: usize) {
        if let Some(g) = &self.gauge {
            g.store(depth, Ordering::Relaxed);
        }
    }

    /// Enqueue `item`. Under [`OverflowPolicy::DropOldest`] a full queue
    /// evicts its head, which is returned as `Ok(Some(evicted))`.
    pub fn offer(&self, item: T) -> Result<Option<T>, Closed<T>> {
        let mut st = self.lock();
        let mut evicted = None;
        loop {
            if st.closed {
                return Err(Closed(item));
            }
            if st.items.len() < self.capacity {
                break;
            }
            match self.policy {
                OverflowPolicy::DropOldest => {
                    evicted = st.items.pop_front();
                    st.drops += 1;
                    break;
                }
                OverflowPolicy::Block => {
                    st = self.not_full.wait(st).unwrap_or_else(|p| p.into_inner());
                }
            }
        }
        st.items.push_back(item);
        self.publish(st.items.len());
        drop(st);
        self.not_empty.notify_one();
        Ok(evicted)
    }

    /// Next item in FIFO order; `None` once closed and drained.
    pub fn take(&self) -> Option<T> {
        let mut st = self.lock();
        loop {
            if let Some(item) = st.items.pop_front() {
                self.publish(st.items.len());
                drop(st);
                self.not_full.notify_one();
                return Some(item);
            }
            if st.closed {
                return None;
            }
            st = self.not_empty.wait(st).unwrap_or_else(|p| p.into_inner());
        }
    }

    /// Like [`take`](Self::take) but gives up at `deadline`.
    pub fn take_until(&self, deadline: Instant) -> Take<T> {
        let mut st = self.lock();
        loop {
            if let Some(item) = st.items.pop_front() {
                self.publish(st.items.len());
                drop(st);
                self.not_full.notify_one();
                return Take::Item(item);
            }
            if st.closed {
                return Take::Closed;
            }
            let now = Instant::now();
            if now >= deadline {
                return Take::Timeout;
            }
            st = self
                .not_empty
                .wait_timeout(st, deadline - now)
                .unwrap_or_else(|p| p.into_inner())
                .0;
        }
    }

    /// Reject further offers; queued items stay available to `take`.
    pub fn close(&self) {
        self.lock().closed = true;
        self.not_empty.notify_all();
        self.not_full.notify_all();
    }

    pub fn is_closed(&self) -> bool {
        self.lock().closed
    }

    /// Remove and return everything currently queued.
    pub fn drain(&self) -> Vec<T> {
        let mut st = self.lock();
        let out: Vec<T> = st.items.drain(..).collect();
        self.publish(0);
        drop(st);
        self.not_full.notify_all();
        out
    }

    pub fn len(&self) -> usize {
        self.lock().items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn drops(&self) -> u64 {
        self.lock().drops
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::thread;
    use std::time::Duration;

    #[test]
    fn drop_oldest_evicts_head() {
        let q = BoundedQueue::new(2, OverflowPolicy::DropOldest);
        assert_eq!(q.offer('a'), Ok(None));
        assert_eq!(q.offer('b'), Ok(None));
        assert_eq!(q.offer('c'), Ok(Some('a')));
        assert_eq!(q.drops(), 1);
        assert_eq!(q.take(), Some('b'));
        assert_eq!(q.take(), Some('c'));
    }

    #[test]
    fn offer_with_room_never_drops() {
        let q = BoundedQueue::new(2, OverflowPolicy::Block);
        q.offer('a').unwrap();
        q.offer('b').unwrap();
        assert_eq!(q.len(), 2);
        assert_eq!(q.drops(), 0);
    }

    #[test]
    fn closed_queue_rejects_and_drains() {
        let q = BoundedQueue::new(4, OverflowPolicy::Block);
        q.offer(1).unwrap();
        q.close();
        assert_eq!(q.offer(2), Err(Closed(2)));
        assert_eq!(q.take(), Some(1));
        assert_eq!(q.take(), None);
        let empty: BoundedQueue<u8> = BoundedQueue::new(1, OverflowPolicy::Block);
        empty.close();
        assert_eq!(empty.take(), None);
        assert_eq!(empty.take_until(Instant::now() + Duration::from_secs(1)), Take::Closed);
    }

    #[test]
    fn fifo_order() {
        let q = BoundedQueue::new(3, OverflowPolicy::Block);
        for c in ['a', 'b', 'c'] {
            q.offer(c).unwrap();
        }
        assert_eq!((q.take(), q.take(), q.take()), (Some('a'), Some('b'), Some('c')));
    }

    #[test]
    fn blocked_producer_released_by_close() {
        let q = Arc::new(BoundedQueue::new(1, OverflowPolicy::Block));
        q.offer(0).unwrap();
        let q2 = Arc::clone(&q);
        let h = thread::spawn(move || q2.offer(1));
        thread::sleep(Duration::from_millis(50));
        q.close();
        assert_eq!(h.join().unwrap(), Err(Closed(1)));
    }

    #[test]
    fn take_until_times_out() {
        let q: BoundedQueue<u8> = BoundedQueue::new(1, OverflowPolicy::Block);
        let t0 = Instant::now();
        assert_eq!(q.take_until(t0 + Duration::from_millis(30)), Take::Timeout);
        assert!(t0.elapsed() >= Duration::from_millis(30));
    }

    #[test]
    fn spsc_stress_delivers_everything_in_order() {
        let gauge = Arc::new(AtomicUsize::new(0));
        let q = Arc::new(BoundedQueue::new(8, OverflowPolicy::Block).with_gauge(Arc::clone(&gauge)));
        let producer = {
            let q = Arc::clone(&q);
            thread::spawn(move || {
                for i in 0..10_000u32 {
                    q.offer(i).unwrap();
                }
                q.close();
            })
        };
        let mut expected = 0u32;
        while let Some(v) = q.take() {
            assert_eq!(v, expected);
            assert!(gauge.load(Ordering::Relaxed) <= 8);
            expected += 1;
        }
        producer.join().unwrap();
        assert_eq!(expected, 10_000);
        assert_eq!(q.drops(), 0);
    }
}
