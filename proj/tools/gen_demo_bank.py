#!/usr/bin/env python3
"""Regenerates data/banks/demo_bank_89.json. Output is deterministic."""
import json
import pathlib

PREMIUM = "openai/gpt-5-mini"
LOCAL = "openai/gpt-oss-20b"

# (step, difficulty, text)
RC = [
    ("build", "easy", "which resistor and capacitor values should I use for the RC circuit"),
    ("build", "easy", "how do I connect the capacitor on the breadboard so the polarity is right"),
    ("build", "easy", "where does the ground lead of the function generator go"),
    ("build", "easy", "do the electrolytic capacitor stripes mark the negative leg"),
    ("build", "easy", "how do I read the colour bands on my resistor"),
    ("build", "moderate", "my multimeter shows a different resistance than the colour code says"),
    ("build", "moderate", "should the capacitor be in series or in parallel with the output probe"),
    ("build", "moderate", "the breadboard rails seem split in the middle, does that matter"),
    ("build", "advanced", "why does the circuit behave differently when I swap the resistor and capacitor positions"),
    ("build", "advanced", "explain how the generator output impedance changes my effective resistance"),
    ("build", "easy", "what does the square wave amplitude need to be for this lab"),
    ("build", "moderate", "can I use two capacitors in parallel if I do not have the listed value"),
    ("scope", "easy", "how do I set the oscilloscope timebase for the step response"),
    ("scope", "easy", "which channel should measure the capacitor voltage"),
    ("scope", "easy", "how do I make the trigger hold the waveform still"),
    ("scope", "easy", "what volts per division setting should I start with"),
    ("scope", "moderate", "the scope trace keeps drifting sideways even with trigger on"),
    ("scope", "moderate", "should the probe be on x1 or x10 for this measurement"),
    ("scope", "moderate", "my waveform looks like a triangle instead of an exponential curve"),
    ("scope", "moderate", "how do I use the cursors to read the rise on the capacitor"),
    ("scope", "advanced", "why is there ringing on the edges of my square wave"),
    ("scope", "advanced", "diagnose the overshoot I see when the probe ground clip is long"),
    ("scope", "moderate", "the signal is clipped at the top of the screen, what should I change"),
    ("scope", "easy", "should coupling be set to DC or AC for the capacitor channel"),
    ("tau", "easy", "how do I find the time constant from the scope screen"),
    ("tau", "moderate", "at what percentage of the final voltage do I read one time constant"),
    ("tau", "moderate", "my measured time constant is twice the value I calculated"),
    ("tau", "moderate", "should I measure tau on the charging or the discharging curve"),
    ("tau", "moderate", "how many time constants until the capacitor is fully charged"),
    ("tau", "advanced", "derive the time constant from the slope of the log of the voltage"),
    ("tau", "advanced", "why does the discharge curve not reach zero before the next edge"),
    ("tau", "easy", "what units should the time constant be recorded in"),
    ("tau", "moderate", "the capacitor voltage never reaches the full generator amplitude"),
    ("tau", "advanced", "explain the transient when the square wave period is shorter than five tau"),
    ("tau", "moderate", "can I use the fall time measurement on the scope as tau"),
    ("tau", "easy", "how many readings of tau should I take for the table"),
    ("tau", "moderate", "the time constant changes when I change the generator frequency"),
    ("analysis", "easy", "how do I compute the expected tau from the component values"),
    ("analysis", "easy", "what percent difference formula should I use in the report"),
    ("analysis", "moderate", "how do I estimate the uncertainty in my measured tau"),
    ("analysis", "moderate", "should I include the capacitor tolerance in the error budget"),
    ("analysis", "moderate", "how do I plot the charging data to get a straight line"),
    ("analysis", "advanced", "fit an exponential to my data and explain the residual pattern"),
    ("analysis", "advanced", "why is my fitted tau consistently lower than the theoretical value"),
    ("analysis", "advanced", "how would a non-ideal capacitor leakage show up in the discharge data"),
    ("analysis", "advanced", "troubleshoot why my log plot bends at late times"),
    ("analysis", "moderate", "what should the discussion say about sources of systematic error"),
    ("analysis", "advanced", "how does the scope input resistance load the circuit and shift tau"),
    ("analysis", "easy", "how many significant figures should tau have in the results table"),
    ("analysis", "moderate", "is a ten percent disagreement with theory acceptable for this lab"),
]

LED = [
    ("wiring", "easy", "which way round does the LED go in the circuit"),
    ("wiring", "easy", "what current limiting resistor should I put in series with the LED"),
    ("wiring", "easy", "where do I connect the ammeter to measure LED current"),
    ("wiring", "easy", "how do I tell the anode from the cathode on this LED"),
    ("wiring", "moderate", "the LED does not light at all when the supply is on"),
    ("wiring", "moderate", "should the voltmeter go across the LED only or across the LED and resistor"),
    ("wiring", "advanced", "why does the LED get dimmer when I add the ammeter"),
    ("wiring", "moderate", "can I use the bench supply current limit instead of a resistor"),
    ("wiring", "easy", "what supply voltage should I start the sweep from"),
    ("sweep", "easy", "how big should the voltage steps be when sweeping the LED"),
    ("sweep", "easy", "how do I set the SMU to source voltage and measure current"),
    ("sweep", "moderate", "the current reading jumps around at low voltage"),
    ("sweep", "easy", "what compliance current should I set on the source meter"),
    ("sweep", "moderate", "my SCPI sweep script times out before the last point"),
    ("sweep", "advanced", "why does the current keep rising slowly while I hold the voltage fixed"),
    ("sweep", "advanced", "diagnose why the meter autorange causes steps in my IV curve"),
    ("sweep", "easy", "how many points do I need in the forward bias region"),
    ("sweep", "moderate", "should I sweep up and down to check for hysteresis"),
    ("sweep", "moderate", "the measured current is negative for small forward voltages"),
    ("turnon", "easy", "how do I find the turn on voltage from the IV curve"),
    ("turnon", "easy", "what current should I use to define the LED turn on point"),
    ("turnon", "moderate", "my red and green LEDs turn on at very different voltages, is that right"),
    ("turnon", "moderate", "should turn on be read from a linear or a log current axis"),
    ("turnon", "advanced", "explain how the turn on voltage relates to the photon energy of the LED"),
    ("turnon", "moderate", "the turn on voltage shifts when the LED warms up"),
    ("turnon", "easy", "what units and precision should the turn on voltage be reported in"),
    ("turnon", "moderate", "how do I compare my turn on voltage with the datasheet value"),
    ("turnon", "advanced", "why is the knee of my IV curve so rounded instead of sharp"),
    ("ideality", "easy", "what equation do I use for the diode ideality factor"),
    ("ideality", "easy", "what value of thermal voltage should I use at room temperature"),
    ("ideality", "moderate", "which part of the curve should I fit to get the ideality factor"),
    ("ideality", "moderate", "how do I make a semilog plot of current against voltage"),
    ("ideality", "advanced", "fit the exponential region and explain why n is larger than two"),
    ("ideality", "advanced", "how does series resistance bend the top of the log current plot"),
    ("ideality", "moderate", "my ideality factor changes a lot depending on the fit range"),
    ("ideality", "advanced", "derive the saturation current from the intercept of the semilog fit"),
    ("ideality", "easy", "how do I get the slope from the straight line section of the plot"),
    ("ideality", "moderate", "what uncertainty should I quote on the ideality factor"),
    ("ideality", "advanced", "troubleshoot the nonlinear residual left after the exponential fit"),
]

# Tier choices: advanced prefers premium except the first few; a handful of
# easier entries prefer premium as well.
LOCAL_ADVANCED = {"rc_step": 5, "led_iv": 3}
PREMIUM_EASY = {"rc_step": 1, "led_iv": 0}
PREMIUM_MODERATE = {"rc_step": 2, "led_iv": 2}


def entries(lab, rows):
    out = []
    seen = {"easy": 0, "moderate": 0, "advanced": 0}
    counters = {}
    for step, diff, text in rows:
        seen[diff] += 1
        counters[step] = counters.get(step, 0) + 1
        k = seen[diff]
        if diff == "advanced":
            premium = k > LOCAL_ADVANCED[lab]
        elif diff == "easy":
            premium = k <= PREMIUM_EASY[lab]
        else:
            premium = k <= PREMIUM_MODERATE[lab]
        out.append({
            "id": f"{lab}.{step}.{counters[step]:02d}",
            "text": text,
            "preferred_model": PREMIUM if premium else LOCAL,
            "tags": [f"lab:{lab}", f"step:{step}", f"difficulty:{diff}"],
            "overlay": "socratic_troubleshoot",
            "max_cost_usd": 0.01,
            "hint_level": "L2" if premium else "L1",
            "max_hint_level": "L3",
            "embedding": {"provider": "mock"},
        })
    return out


def main():
    bank = entries("rc_step", RC) + entries("led_iv", LED)
    assert len(bank) == 89, len(bank)
    root = pathlib.Path(__file__).resolve().parent.parent
    path = root / "data" / "banks" / "demo_bank_89.json"
    path.write_text(json.dumps({"entries": bank}, indent=1) + "\n")


if __name__ == "__main__":
    main()
