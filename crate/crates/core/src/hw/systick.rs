use super::SecurityState;
use serde::{Deserialize, Serialize};

/// 24-bit SysTick down-counter.
///
/// The counter decrements once per cycle. The 1 -> 0 transition fires the
/// tick; the cycle after reaching 0 reloads `reload`. The firing period is
/// therefore `reload + 1` cycles.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SysTickState {
    pub reload: u32,
    pub current: u32,
    pub enabled: bool,
    pub security: SecurityState,
}

pub const SYSTICK_MAX_RELOAD: u32 = 0x00ff_ffff;

impl SysTickState {
    pub fn new(reload: u32, security: SecurityState) -> SysTickState {
        SysTickState { reload, current: 0, enabled: false, security }
    }

    fn period(&self) -> u64 {
        self.reload as u64 + 1
    }

    /// Cycles until the next firing.
    pub fn cycles_to_fire(&self) -> u64 {
        if self.current == 0 {
            self.period()
        } else {
            self.current as u64
        }
    }

    /// Writing SYST_CVR clears the counter; the next firing is a full
    /// period away.
    pub fn clear(&mut self) {
        self.current = 0;
    }

    /// Advances `cycles` and returns the number of firings. A disabled timer
    /// does not count.
    pub fn advance(&mut self, cycles: u64) -> u64 {
        if !self.enabled || cycles == 0 {
            return 0;
        }
        let first = self.cycles_to_fire();
        if cycles < first {
            self.current = if self.current == 0 {
                // reloaded after one cycle, then counted down
                (self.period() - cycles) as u32
            } else {
                self.current - cycles as u32
            };
            return 0;
        }
        let rest = cycles - first;
        let fired = 1 + rest / self.period();
        let rem = rest % self.period();
        self.current = if rem == 0 { 0 } else { (self.period() - rem) as u32 };
        fired
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn timer(reload: u32, current: u32) -> SysTickState {
        SysTickState { reload, current, enabled: true, security: SecurityState::Secure }
    }

    // cycle-by-cycle reference
    fn step_oracle(reload: u32, mut current: u32, cycles: u64) -> (u64, u32) {
        let mut fired = 0;
        for _ in 0..cycles {
            if current == 0 {
                current = reload;
            } else {
                current -= 1;
                if current == 0 {
                    fired += 1;
                }
            }
        }
        (fired, current)
    }

    #[test]
    fn exact_underflow() {
        let mut st = timer(400_000, 10);
        assert_eq!(st.advance(10), 1);
        assert_eq!(st.current, 0);
    }

    #[test]
    fn zero_advance() {
        let mut st = timer(400_000, 10);
        assert_eq!(st.advance(0), 0);
        assert_eq!(st.current, 10);
    }

    #[test]
    fn three_periods() {
        let mut st = timer(19_999, 19_999);
        assert_eq!(st.advance(60_000), 3);
        assert_eq!(step_oracle(19_999, 19_999, 60_000).0, 3);
    }

    #[test]
    fn disabled_does_not_count() {
        let mut st = timer(100, 5);
        st.enabled = false;
        assert_eq!(st.advance(1000), 0);
        assert_eq!(st.current, 5);
    }

    #[test]
    fn cleared_counter_fires_after_full_period() {
        let mut st = timer(19_999, 123);
        st.clear();
        assert_eq!(st.cycles_to_fire(), 20_000);
        assert_eq!(st.advance(19_999), 0);
        assert_eq!(st.advance(1), 1);
    }

    proptest! {
        #[test]
        fn advance_matches_step_oracle(reload in 1u32..200, current in 0u32..200, cycles in 0u64..2000) {
            let current = current.min(reload);
            let mut st = timer(reload, current);
            let (fired, after) = step_oracle(reload, current, cycles);
            prop_assert_eq!(st.advance(cycles), fired);
            prop_assert_eq!(st.current, after);
            prop_assert!(st.current <= st.reload);
        }

        #[test]
        fn advance_is_additive(reload in 1u32..500, current in 0u32..500, a in 0u64..3000, b in 0u64..3000) {
            let current = current.min(reload);
            let mut split = timer(reload, current);
            let mut whole = timer(reload, current);
            let n = split.advance(a) + split.advance(b);
            prop_assert_eq!(n, whole.advance(a + b));
            prop_assert_eq!(split.current, whole.current);
        }
    }
}
