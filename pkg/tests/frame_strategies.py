"""Hypothesis strategies producing valid PhyPayloads of every MType."""

from hypothesis import strategies as st

from lorans.codec import (DataPayload, FCtrl, JoinAcceptPayload, JoinRequestPayload, MType,
                          PhyPayload)

u32 = st.integers(0, 0xFFFFFFFF)
u24 = st.integers(0, 0xFFFFFF)
mic = st.binary(min_size=4, max_size=4)


@st.composite
def data_payloads(draw, uplink):
    fopts = draw(st.binary(max_size=15))
    fport = draw(st.one_of(st.none(), st.integers(0 if not fopts else 1, 255)))
    frm = b"" if fport is None else draw(st.binary(max_size=64))
    if uplink:
        fctrl = FCtrl(adr=draw(st.booleans()), adr_ack_req=draw(st.booleans()), ack=draw(st.booleans()),
                      class_b=draw(st.booleans()))
    else:
        fctrl = FCtrl(adr=draw(st.booleans()), ack=draw(st.booleans()), fpending=draw(st.booleans()))
    return DataPayload(draw(u32), fctrl, draw(st.integers(0, 0xFFFF)), fopts, fport, frm)


join_requests = st.builds(JoinRequestPayload, st.binary(min_size=8, max_size=8),
                          st.binary(min_size=8, max_size=8), st.integers(0, 0xFFFF))
join_accepts = st.builds(JoinAcceptPayload, u24, u24, u32, st.integers(0, 255), st.integers(0, 255),
                         st.one_of(st.none(), st.binary(min_size=16, max_size=16)))


@st.composite
def frames(draw):
    mtype = draw(st.sampled_from(list(MType)))
    if mtype == MType.JOIN_REQUEST:
        body = draw(join_requests)
    elif mtype == MType.JOIN_ACCEPT:
        body = draw(join_accepts)
    else:
        body = draw(data_payloads(mtype.is_uplink))
    return PhyPayload(mtype, body, draw(mic), draw(st.integers(0, 3)))
