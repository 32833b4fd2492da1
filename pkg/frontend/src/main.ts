import { ApiClient } from "./api.js";
import { RatingSession } from "./rating.js";

function raterId(): string {
  // one rater id per browser tab session
  let id = sessionStorage.getItem("bridgelab-rater");
  if (!id) {
    id = `rater-${Math.random().toString(36).slice(2, 10)}`;
    sessionStorage.setItem("bridgelab-rater", id);
  }
  return id;
}

window.addEventListener("DOMContentLoaded", () => {
  const root = document.getElementById("app");
  if (!root) throw new Error("missing #app element");
  const session = new RatingSession(root, new ApiClient(""), raterId());
  void session.start();
});
