/// Allocator for the 16-bit ICMP identifiers that key measurement tasks.
///
/// Identifiers are handed out in increasing order, wrapping at 65535 and
/// skipping ids still in use.
#[derive(Debug, Clone)]
pub struct IdAllocator {
    next_id: u16,
    in_use: Vec<u64>,
    live: u32,
}

pub const ID_CAPACITY: u32 = 1 << 16;

impl IdAllocator {
    pub fn new() -> Self {
        IdAllocator { next_id: 0, in_use: vec![0; (ID_CAPACITY / 64) as usize], live: 0 }
    }

    pub fn is_live(&self, id: u16) -> bool {
        self.in_use[id as usize / 64] & (1 << (id % 64)) != 0
    }

    pub fn live(&self) -> u32 {
        self.live
    }

    pub fn is_full(&self) -> bool {
        self.live == ID_CAPACITY
    }

    pub fn allocate(&mut self) -> Option<u16> {
        if self.is_full() {
            return None;
        }
        let mut id = self.next_id;
        while self.is_live(id) {
            id = id.wrapping_add(1);
        }
        self.in_use[id as usize / 64] |= 1 << (id % 64);
        self.live += 1;
        self.next_id = id.wrapping_add(1);
        Some(id)
    }

    pub fn release(&mut self, id: u16) {
        if self.is_live(id) {
            self.in_use[id as usize / 64] &= !(1 << (id % 64));
            self.live -= 1;
        }
    }
}

impl Default for IdAllocator {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sequential_then_full() {
        let mut a = IdAllocator::new();
        assert_eq!(a.allocate(), Some(0));
        assert_eq!(a.allocate(), Some(1));
        for _ in 2..ID_CAPACITY {
            assert!(a.allocate().is_some());
        }
        assert!(a.is_full());
        assert_eq!(a.allocate(), None);
        a.release(17);
        assert_eq!(a.allocate(), Some(17));
    }

    #[test]
    fn wraps_and_skips_live_ids() {
        let mut a = IdAllocator::new();
        a.next_id = u16::MAX;
        assert_eq!(a.allocate(), Some(u16::MAX));
        assert_eq!(a.allocate(), Some(0));
        a.next_id = 0;
        assert_eq!(a.allocate(), Some(1));
    }
}
