"""433 MHz channel plan constants used by the server and the simulator."""

DATARATES = {
    0: "SF12BW125",
    1: "SF11BW125",
    2: "SF10BW125",
    3: "SF9BW125",
    4: "SF8BW125",
    5: "SF7BW125",
}
DR_BY_DATR = {v: k for k, v in DATARATES.items()}
DR_MIN, DR_MAX = 0, 5

# max FRMPayload bytes (no FOpts) per data rate
MAX_PAYLOAD = {0: 51, 1: 51, 2: 51, 3: 115, 4: 242, 5: 242}

UPLINK_CHANNELS = (433.175, 433.375, 433.575)
RX2_FREQ = 434.665
RX2_DR = 0

MAX_TX_POWER_DBM = 20
TX_POWER_STEP_DB = 3
TX_POWER_MAX_INDEX = 5

# required demodulation SNR per spreading factor, dB
DEMOD_FLOOR = {7: -7.5, 8: -10.0, 9: -12.5, 10: -15.0, 11: -17.5, 12: -20.0}


def tx_power_dbm(index: int) -> int:
    return MAX_TX_POWER_DBM - TX_POWER_STEP_DB * index


def dr_of(datr: str) -> int:
    return DR_BY_DATR[datr]


def sf_of_dr(dr: int) -> int:
    return 12 - dr


def rx1_dr(uplink_dr: int, offset: int) -> int:
    return max(DR_MIN, uplink_dr - offset)


def airtime(payload_len: int, sf: int, bw_khz: int = 125, cr: int = 1, preamble: int = 8,
            explicit_header: bool = True, crc: bool = True) -> float:
    """LoRa time on air in seconds (Semtech AN1200.13 formula)."""
    tsym = (2 ** sf) / (bw_khz * 1000.0)
    de = 1 if (bw_khz == 125 and sf >= 11) else 0
    ih = 0 if explicit_header else 1
    num = 8 * payload_len - 4 * sf + 28 + 16 * crc - 20 * ih
    n_payload = 8 + max(-(-num // (4 * (sf - 2 * de))) * (cr + 4), 0)
    return (preamble + 4.25 + n_payload) * tsym
