"""Regenerate the corpus programs and their golden results.

    python3 tests/gen_corpus.py [--check]

Input data comes from fixed LCG seeds; golden values come from tests/oracles.py.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))
import oracles as o  # noqa: E402

CORPUS_DIR = Path(__file__).resolve().parents[1] / "src" / "flashvm" / "corpus"


def _words(vals) -> str:
    return ", ".join(str(v) for v in vals)


# Kernels read like unoptimized compiler output: loop indices stay in registers,
# every other C variable lives in a stack slot and is reloaded at each use.

CRC_BODY = """
func crc_word(r1) {
  local c : word[1]
  local i : word[1]
entry:
  load r2, crc
  store c, r2
  const r3, 12
  jmp nib
nib:
  load r2, c
  shr r4, r2, 12
  shr r5, r1, r3
  xor r4, r4, r5
  and r4, r4, 15
  store i, r4
  load r4, i
  load r6, tab[r4]
  load r2, c
  shl r2, r2, 4
  xor r2, r2, r6
  store c, r2
  sub r3, r3, 4
  cmp r7, r3, 0
  br r7, done, nib
done:
  load r2, c
  store crc, r2
  ret
}

func main() {
entry:
  const r10, 0
  jmp loop
loop:
  load r1, buf[r10]
  call crc_word
  add r10, r10, 1
  cmp r11, r10, 64
  br r11, loop, done
done:
  load r1, crc
  store result, r1
  out r1
  halt
}
"""

# one helper covers the whole buffer, so a return-only placement yields a single long interval
CRC_LONG_BODY = """
func crc_all() {
  local c : word[1]
  local i : word[1]
  local w : word[1]
entry:
  load r2, crc
  store c, r2
  const r10, 0
  jmp word
word:
  load r1, buf[r10]
  store w, r1
  const r3, 12
  jmp nib
nib:
  load r2, c
  shr r4, r2, 12
  load r1, w
  shr r5, r1, r3
  xor r4, r4, r5
  and r4, r4, 15
  store i, r4
  load r4, i
  load r6, tab[r4]
  load r2, c
  shl r2, r2, 4
  xor r2, r2, r6
  store c, r2
  sub r3, r3, 4
  cmp r7, r3, 0
  br r7, next, nib
next:
  add r10, r10, 1
  cmp r11, r10, 64
  br r11, word, done
done:
  load r2, c
  store crc, r2
  ret
}

func main() {
entry:
  call crc_all
  load r1, crc
  store result, r1
  out r1
  halt
}
"""

FFT_BODY = """
func bitrev() {
  local t : word[1]
entry:
  const r1, 0
  jmp perm
perm:
  load r2, rev[r1]
  cmp r3, r1, r2
  br r3, swap, pnext
swap:
  load r4, re[r1]
  store t, r4
  load r5, re[r2]
  store re[r1], r5
  load r4, t
  store re[r2], r4
  load r4, im[r1]
  store t, r4
  load r5, im[r2]
  store im[r1], r5
  load r4, t
  store im[r2], r4
  jmp pnext
pnext:
  add r1, r1, 1
  cmp r3, r1, 8
  br r3, perm, done
done:
  ret
}

func butterfly(r1, r2, r3) {
  local c : word[1]
  local s : word[1]
  local tr : word[1]
  local ti : word[1]
entry:
  load r9, wr[r3]
  store c, r9
  load r9, wi[r3]
  store s, r9
  load r11, re[r2]
  load r9, c
  mul r13, r11, r9
  load r12, im[r2]
  load r10, s
  mul r14, r12, r10
  add r13, r13, r14
  shr r13, r13, 7
  store tr, r13
  load r12, im[r2]
  load r9, c
  mul r14, r12, r9
  load r11, re[r2]
  load r10, s
  mul r15, r11, r10
  sub r14, r14, r15
  shr r14, r14, 7
  store ti, r14
  load r11, re[r1]
  load r13, tr
  sub r15, r11, r13
  shr r15, r15, 1
  store re[r2], r15
  load r12, im[r1]
  load r14, ti
  sub r15, r12, r14
  shr r15, r15, 1
  store im[r2], r15
  load r11, re[r1]
  load r13, tr
  add r15, r11, r13
  shr r15, r15, 1
  store re[r1], r15
  load r12, im[r1]
  load r14, ti
  add r15, r12, r14
  shr r15, r15, 1
  store im[r1], r15
  ret
}

func main() {
entry:
  call bitrev
  const r5, 1
  const r6, 4
  jmp stage
stage:
  const r7, 0
  jmp group
group:
  const r8, 0
  jmp bfly
bfly:
  add r1, r7, r8
  add r2, r1, r5
  mul r3, r8, r6
  call butterfly
  add r8, r8, 1
  cmp r4, r8, r5
  br r4, bfly, gnext
gnext:
  add r7, r7, r5
  add r7, r7, r5
  cmp r4, r7, 8
  br r4, group, snext
snext:
  shl r5, r5, 1
  shr r6, r6, 1
  cmp r4, r5, 8
  br r4, stage, emit
emit:
  const r1, 0
  jmp oloop
oloop:
  load r2, re[r1]
  out r2
  load r2, im[r1]
  out r2
  add r1, r1, 1
  cmp r3, r1, 8
  br r3, oloop, done
done:
  halt
}
"""

FEISTEL_BODY = """
func round(r1, r2) {
  local k : word[1]
  local x : word[1]
  local y : word[1]
  local lft : word[1]
  local rgt : word[1]
entry:
  and r3, r2, 7
  load r4, key[r3]
  store k, r4
  add r5, r1, 1
  load r6, data[r5]
  store rgt, r6
  load r7, data[r1]
  store lft, r7
  load r6, rgt
  load r4, k
  xor r8, r6, r4
  store x, r8
  load r8, x
  and r9, r8, 15
  load r9, sbox[r9]
  store y, r9
  load r8, x
  shr r12, r8, 4
  and r12, r12, 15
  load r12, sbox[r12]
  shl r12, r12, 4
  load r9, y
  or r9, r9, r12
  store y, r9
  load r8, x
  shr r12, r8, 8
  and r12, r12, 15
  load r12, sbox[r12]
  shl r12, r12, 8
  load r9, y
  or r9, r9, r12
  store y, r9
  load r8, x
  shr r12, r8, 12
  and r12, r12, 15
  load r12, sbox[r12]
  shl r12, r12, 12
  load r9, y
  or r9, r9, r12
  store y, r9
  load r9, y
  shl r12, r9, 3
  load r9, y
  shr r13, r9, 13
  and r13, r13, 7
  or r9, r12, r13
  load r7, lft
  xor r7, r7, r9
  load r6, rgt
  store data[r1], r6
  store data[r5], r7
  ret
}

func main() {
entry:
  const r10, 0
  jmp block
block:
  const r11, 0
  jmp rnd
rnd:
  mov r1, r10
  mov r2, r11
  call round
  add r11, r11, 1
  cmp r14, r11, 32
  br r14, rnd, bnext
bnext:
  add r10, r10, 2
  cmp r14, r10, 8
  br r14, block, emit
emit:
  const r1, 0
  jmp oloop
oloop:
  load r2, data[r1]
  out r2
  add r1, r1, 1
  cmp r3, r1, 8
  br r3, oloop, done
done:
  halt
}
"""


def crc16(body=CRC_BODY) -> tuple[str, dict]:
    buf = o.lcg_words(64, 1)
    tab = o.crc16_nibble_table()
    text = (f"global buf : word[64] = {_words(buf)}\n"
            f"global tab : word[16] = {_words(tab)}\n"
            "global crc : word[1] = 0xFFFF\n"
            "global result : word[1]\n" + body)
    c = o.crc16_words(buf)
    return text, {"globals": {"buf": buf, "tab": tab, "crc": [c], "result": [c]}, "outputs": [c]}


def fft8() -> tuple[str, dict]:
    raw = o.lcg_words(16, 7)
    re = [(w % 201) - 100 for w in raw[:8]]
    im = [(w % 201) - 100 for w in raw[8:]]
    text = (f"global re : word[8] = {_words(re)}\n"
            f"global im : word[8] = {_words(im)}\n"
            f"global wr : word[4] = {_words(o.COS8)}\n"
            f"global wi : word[4] = {_words(o.SIN8)}\n"
            f"global rev : word[8] = {_words(o.BITREV8)}\n" + FFT_BODY)
    fr, fi = o.fft8_q7(re, im)
    m = o.MASK
    outs = [v for pair in zip(fr, fi) for v in pair]
    return text, {"globals": {"re": fr, "im": fi, "wr": [v & m for v in o.COS8], "wi": o.SIN8,
                              "rev": o.BITREV8}, "outputs": outs}


def feistel() -> tuple[str, dict]:
    data = o.lcg_words(8, 11)
    keys = o.lcg_words(8, 23)
    text = (f"global data : word[8] = {_words(data)}\n"
            f"global key : word[8] = {_words(keys)}\n"
            f"global sbox : word[16] = {_words(o.SBOX4)}\n" + FEISTEL_BODY)
    enc = []
    for b in range(0, 8, 2):
        enc.extend(o.feistel_encrypt(data[b], data[b + 1], keys))
    return text, {"globals": {"data": enc, "key": keys, "sbox": o.SBOX4}, "outputs": enc}


PROGRAMS = {"crc16": crc16, "fft8": fft8, "feistel": feistel,
            "crc16_long": lambda: crc16(CRC_LONG_BODY)}


def main(check: bool = False) -> int:
    bad = 0
    for name, gen in PROGRAMS.items():
        text, gold = gen()
        gold_text = json.dumps(gold, indent=1) + "\n"
        air, js = CORPUS_DIR / f"{name}.air", CORPUS_DIR / f"{name}.json"
        if check:
            if air.read_text() != text or js.read_text() != gold_text:
                print(f"{name}: out of date")
                bad += 1
        else:
            air.write_text(text)
            js.write_text(gold_text)
    return bad


if __name__ == "__main__":
    sys.exit(main("--check" in sys.argv))
