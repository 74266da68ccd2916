/**
 * The client-side half of the wire-contract check: response parsing and the
 * field lists in shared/api_contract.json must agree with the typed client.
 */

import { readFileSync } from "node:fs";
import { fileURLToPath } from "node:url";
import { dirname, join } from "node:path";

import { describe, expect, it } from "vitest";

import { ApiClient, InvertResponse } from "../src/api.js";
import { EDIT_DEBOUNCE_MS } from "../src/controller.js";

const here = dirname(fileURLToPath(import.meta.url));
const contract = JSON.parse(
  readFileSync(join(here, "..", "..", "shared", "api_contract.json"), "utf-8"),
);

function jsonResponse(body: unknown, status = 200): Response {
  return new Response(JSON.stringify(body), {
    status,
    headers: { "Content-Type": "application/json" },
  });
}

describe("wire contract", () => {
  it("invert request/response fields match the shared contract", async () => {
    const sample: InvertResponse = {
      session_id: "x",
      inversion_png: "a",
      blended_png: "b",
      mask_png: "c",
      psnr: 1,
      ssim: 0.5,
      aoa: 0.1,
    };
    expect(Object.keys(sample).sort()).toEqual(
      [...contract.endpoints.invert.response].sort(),
    );

    let captured: { url: string; body: unknown } | null = null;
    const client = new ApiClient("http://svc", async (url, init) => {
      captured = { url, body: JSON.parse(String(init?.body)) };
      return jsonResponse(sample);
    });
    const resp = await client.invert("imgbytes");
    expect(resp).toEqual(sample);
    expect(captured!.url).toBe(`http://svc${contract.endpoints.invert.path}`);
    expect(Object.keys(captured!.body as object)).toEqual(
      contract.endpoints.invert.request,
    );
  });

  it("edit request/response fields match the shared contract", async () => {
    let captured: unknown = null;
    const client = new ApiClient("http://svc", async (_url, init) => {
      captured = JSON.parse(String(init?.body));
      return jsonResponse({ edited_png: "e", mask_png: "m" });
    });
    const resp = await client.edit("sid", "smile", 1.25);
    expect(Object.keys(resp).sort()).toEqual(
      [...contract.endpoints.edit.response].sort(),
    );
    expect(Object.keys(captured as object).sort()).toEqual(
      [...contract.endpoints.edit.request].sort(),
    );
  });

  it("parses structured error bodies", async () => {
    const client = new ApiClient("http://svc", async () =>
      jsonResponse(
        { detail: { code: "not_square", message: "image must be square" } },
        422,
      ),
    );
    await expect(client.invert("x")).rejects.toMatchObject({
      status: 422,
      code: "not_square",
    });
  });

  it("debounce interval matches the contract", () => {
    expect(EDIT_DEBOUNCE_MS).toBe(contract.limits.edit_debounce_ms);
  });

  it("strength clamp range matches the contract", () => {
    expect(contract.limits.strength).toEqual([-3.0, 3.0]);
  });
});
