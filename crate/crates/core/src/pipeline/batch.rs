use std::time::{Duration, Instant};

use super::queue::{BoundedQueue, Take};

/// Accumulates items into batches of `size`, with a partial flush once the
/// oldest pending item has waited `flush_after`.
#[derive(Debug)]
pub struct Batcher<T> {
    size: usize,
    flush_after: Duration,
    items: Vec<T>,
    opened: Option<Instant>,
}

impl<T> Batcher<T> {
    pub fn new(size: usize, flush_after: Duration) -> Self {
        assert!(size > 0, "batch size must be positive");
        Self {
            size,
            flush_after,
            items: Vec::with_capacity(size),
            opened: None,
        }
    }

    /// Add an item; returns the batch if it is now full.
    pub fn push(&mut self, item: T, now: Instant) -> Option<Vec<T>> {
        if self.items.is_empty() {
            self.opened = Some(now);
        }
        self.items.push(item);
        if self.items.len() >= self.size {
            self.take()
        } else {
            None
        }
    }

    /// When the pending partial batch must be flushed, if any.
    pub fn deadline(&self) -> Option<Instant> {
        self.opened.map(|t| t + self.flush_after)
    }

    /// The pending partial batch if its deadline has passed.
    pub fn poll(&mut self, now: Instant) -> Option<Vec<T>> {
        match self.deadline() {
            Some(d) if now >= d => self.take(),
            _ => None,
        }
    }

    /// Whatever is pending, regardless of age.
    pub fn take(&mut self) -> Option<Vec<T>> {
        self.opened = None;
        if self.items.is_empty() {
            None
        } else {
            Some(std::mem::replace(&mut self.items, Vec::with_capacity(self.size)))
        }
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }
}

/// Drain `queue` into batches, calling `emit` for each one. Returns once the
/// queue is closed and empty, after flushing any partial batch.
pub fn make_batches<T>(queue: &BoundedQueue<T>, size: usize, flush_after: Duration, mut emit: impl FnMut(Vec<T>)) {
    let mut b = Batcher::new(size, flush_after);
    loop {
        let next = match b.deadline() {
            Some(d) => queue.take_until(d),
            None => match queue.take() {
                Some(item) => Take::Item(item),
                None => Take::Closed,
            },
        };
        match next {
            Take::Item(item) => {
                if let Some(batch) = b.push(item, Instant::now()) {
                    emit(batch);
                }
            }
            Take::Timeout => {
                if let Some(batch) = b.poll(Instant::now()) {
                    emit(batch);
                }
            }
            Take::Closed => {
                if let Some(batch) = b.take() {
                    emit(batch);
                }
                return;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::queue::OverflowPolicy;
    use std::sync::Arc;
    use std::thread;

    #[test]
    fn full_batches_then_final_partial() {
        let q = BoundedQueue::new(16, OverflowPolicy::Block);
        for i in 0..10 {
            q.offer(i).unwrap();
        }
        q.close();
        let mut out = Vec::new();
        make_batches(&q, 4, Duration::from_secs(10), |b| out.push(b));
        assert_eq!(out, vec![vec![0, 1, 2, 3], vec![4, 5, 6, 7], vec![8, 9]]);
    }

    #[test]
    fn stalled_producer_triggers_partial_flush() {
        let q = Arc::new(BoundedQueue::new(16, OverflowPolicy::Block));
        let producer = {
            let q = Arc::clone(&q);
            thread::spawn(move || {
                q.offer(1).unwrap();
                q.offer(2).unwrap();
                thread::sleep(Duration::from_millis(400));
                q.close();
            })
        };
        let t0 = Instant::now();
        let mut out = Vec::new();
        make_batches(&q, 4, Duration::from_millis(100), |b| out.push((b, t0.elapsed())));
        producer.join().unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].0, vec![1, 2]);
        assert!(out[0].1 >= Duration::from_millis(100) && out[0].1 < Duration::from_millis(390), "{:?}", out[0].1);
    }

    #[test]
    fn batcher_bookkeeping() {
        let t = Instant::now();
        let mut b = Batcher::new(3, Duration::from_millis(200));
        assert!(b.deadline().is_none());
        assert_eq!(b.push('a', t), None);
        assert_eq!(b.deadline(), Some(t + Duration::from_millis(200)));
        assert_eq!(b.poll(t + Duration::from_millis(199)), None);
        assert_eq!(b.poll(t + Duration::from_millis(200)), Some(vec!['a']));
        assert!(b.is_empty() && b.deadline().is_none());
        b.push('x', t);
        b.push('y', t);
        assert_eq!(b.push('z', t), Some(vec!['x', 'y', 'z']));
    }
}
