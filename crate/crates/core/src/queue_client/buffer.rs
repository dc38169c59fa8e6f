use std::collections::VecDeque;

/// The send-side accumulator: payloads waiting to be flushed, oldest first.
#[derive(Debug)]
pub struct SendBuffer<T> {
    pending: VecDeque<T>,
    high_water: usize,
    limit: usize,
}

impl<T> SendBuffer<T> {
    pub fn new(limit: usize) -> Self {
        SendBuffer { pending: VecDeque::new(), high_water: 0, limit }
    }

    /// Appends at the back; `Err` hands the item back when the buffer is full.
    pub fn push(&mut self, item: T) -> Result<(), T> {
        if self.pending.len() >= self.limit {
            return Err(item);
        }
        self.pending.push_back(item);
        self.high_water = self.high_water.max(self.pending.len());
        Ok(())
    }

    /// Removes up to `n` items from the front, in order.
    pub fn take_front(&mut self, n: usize) -> Vec<T> {
        let n = n.min(self.pending.len());
        self.pending.drain(..n).collect()
    }

    /// Puts items back at the front, ahead of anything buffered since.
    pub fn restore_front(&mut self, items: Vec<T>) {
        for item in items.into_iter().rev() {
            self.pending.push_front(item);
        }
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    pub fn high_water(&self) -> usize {
        self.high_water
    }

    pub fn limit(&self) -> usize {
        self.limit
    }
}
