/** DOM-free wiring between toggle widgets and the config channel.
 *
 * Each user action maps to exactly one outgoing config message; nothing is
 * batched, repeated, or deferred.
 */

import { configMessage } from "./protocol.js";

export type Send = (text: string) => void;

/** Minimal slice of an <input type=checkbox> the wiring needs. */
export interface CheckboxLike {
  checked: boolean;
  addEventListener(type: "change", handler: () => void): void;
}

export interface ButtonLike {
  addEventListener(type: "click", handler: () => void): void;
}

export function bindToggle(
  el: CheckboxLike,
  field: "use_guidance" | "use_nn",
  send: Send,
): void {
  el.addEventListener("change", () => {
    send(configMessage({ [field]: el.checked }));
  });
}

export function bindResetButton(el: ButtonLike, send: Send): void {
  el.addEventListener("click", () => {
    send(configMessage({ reset: true }));
  });
}
